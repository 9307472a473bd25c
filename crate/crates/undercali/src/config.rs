//! Run configuration: a flat sectioned text format, strict about unknown
//! keys, plus a canonical serializer. Parsing the serializer's output gives
//! back an equal config.
//!
//! ```text
//! # comment
//! [data]
//! source = scenario            # or: jsonl
//!
//! [grid]
//! l_in = 16
//! l_out = 4
//! n_vars = 4
//! window_start = 0
//! window_end = 20
//!
//! [scenario]
//! n_samples = 600
//! seed = 42
//! regime.0 = start=0 offset=0 ar=0.6 noise=1 missing=0.3
//! regime.1 = start=0.5 offset=2.5 ar=0.6 noise=1 missing=0.5
//! ```
//!
//! `offset` takes a comma-separated list for per-variable means.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::engine::{EngineConfig, Mode, UeTarget};
use crate::error::{Error, Result};
use crate::gdc::{InputCali, LossNorm};
use crate::imts_data::GridSpec;
use crate::shiftgen::{Regime, ShiftScenario};
use crate::uncertainty::RangeMode;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Jsonl(PathBuf),
    Scenario { n_samples: usize, seed: u64, regimes: Vec<Regime> },
}

/// Offline split fractions; the remainder of the stream runs online.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub valid_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_frac: 0.20, valid_frac: 0.05 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.train_frac >= 0.0
            && self.valid_frac >= 0.0
            && self.train_frac + self.valid_frac < 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "split fractions {}/{} must be nonnegative and leave room for the online stream",
                self.train_frac, self.valid_frac
            )));
        }
        Ok(())
    }

    /// (train, valid, online) counts for a stream of `n` samples.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = (n as f64 * self.train_frac).floor() as usize;
        let valid = (n as f64 * self.valid_frac).floor() as usize;
        (train, valid, n - train - valid)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub grid: GridSpec,
    pub n_vars: usize,
    pub split: SplitSpec,
    pub forecaster_kind: String,
    pub forecaster_ckpt: Option<PathBuf>,
    pub forecaster_train: TrainSection,
    pub ue_ckpt: Option<PathBuf>,
    pub ue_train: TrainSection,
    pub engine: EngineConfig,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    /// The generator scenario, if this config declares one.
    pub fn scenario(&self) -> Option<ShiftScenario> {
        match &self.data {
            DataSource::Scenario { n_samples, seed, regimes } => Some(ShiftScenario {
                n_vars: self.n_vars,
                n_samples: *n_samples,
                grid: self.grid,
                regimes: regimes.clone(),
                seed: *seed,
            }),
            DataSource::Jsonl(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_vars == 0 {
            return Err(Error::Config("n_vars must be positive".into()));
        }
        self.split.validate()?;
        if self.forecaster_kind != "locf" && self.forecaster_kind != "linear_grid" {
            return Err(Error::Config(format!(
                "unknown forecaster kind {:?}",
                self.forecaster_kind
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        self.engine.validate()?;
        if let Some(sc) = self.scenario() {
            sc.validate()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- parsing

struct RawItem {
    line: usize,
    key: String,
    value: String,
}

struct RawSection {
    line: usize,
    name: String,
    items: Vec<RawItem>,
}

fn scan_sections(text: &str) -> Result<Vec<RawSection>> {
    let mut sections: Vec<RawSection> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Parse { line, msg: "unterminated section header".into() })?
                .trim();
            if name.is_empty() {
                return Err(Error::Parse { line, msg: "empty section name".into() });
            }
            if sections.iter().any(|s| s.name == name) {
                return Err(Error::Parse { line, msg: format!("duplicate section [{name}]") });
            }
            sections.push(RawSection { line, name: name.to_string(), items: Vec::new() });
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Parse { line, msg: format!("expected key = value: {content:?}") })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Parse { line, msg: "empty key".into() });
        }
        let section = sections
            .last_mut()
            .ok_or_else(|| Error::Parse { line, msg: "key before any [section]".into() })?;
        if section.items.iter().any(|i| i.key == key) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate key {key:?} in [{}]", section.name),
            });
        }
        section.items.push(RawItem { line, key, value });
    }
    Ok(sections)
}

/// Typed accessor over one section; tracks which keys were consumed so
/// leftovers can be rejected.
struct SectionView<'a> {
    raw: &'a RawSection,
    used: BTreeSet<&'a str>,
}

impl<'a> SectionView<'a> {
    fn new(raw: &'a RawSection) -> Self {
        SectionView { raw, used: BTreeSet::new() }
    }

    fn get(&mut self, key: &str) -> Option<&'a RawItem> {
        let item = self.raw.items.iter().find(|i| i.key == key)?;
        self.used.insert(&item.key);
        Some(item)
    }

    fn str_opt(&mut self, key: &str) -> Option<String> {
        self.get(key).map(|i| i.value.clone())
    }

    fn require(&mut self, key: &str) -> Result<&'a RawItem> {
        let name = &self.raw.name;
        let line = self.raw.line;
        self.get(key).ok_or_else(|| Error::Parse {
            line,
            msg: format!("[{name}] is missing required key {key:?}"),
        })
    }

    fn parse_with<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: std::str::FromStr,
    {
        match self.get(key) {
            None => Ok(default),
            Some(item) => parse_scalar(item),
        }
    }

    fn finish(self) -> Result<()> {
        for item in &self.raw.items {
            if !self.used.contains(item.key.as_str()) {
                return Err(Error::Parse {
                    line: item.line,
                    msg: format!("unknown key {:?} in [{}]", item.key, self.raw.name),
                });
            }
        }
        Ok(())
    }
}

fn parse_scalar<T: std::str::FromStr>(item: &RawItem) -> Result<T> {
    item.value.parse().map_err(|_| Error::Parse {
        line: item.line,
        msg: format!("cannot parse {:?} for key {:?}", item.value, item.key),
    })
}

fn parse_regime(item: &RawItem) -> Result<Regime> {
    let mut regime = Regime {
        start_frac: f64::NAN,
        mean_offset: vec![0.0],
        ar_coeff: 0.0,
        noise_scale: 1.0,
        missing_rate: 0.0,
    };
    let mut saw_start = false;
    for pair in item.value.split_whitespace() {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Parse {
            line: item.line,
            msg: format!("regime field {pair:?} is not key=value"),
        })?;
        let bad = |what: &str| Error::Parse {
            line: item.line,
            msg: format!("bad regime {what}: {v:?}"),
        };
        match k {
            "start" => {
                regime.start_frac = v.parse().map_err(|_| bad("start"))?;
                saw_start = true;
            }
            "offset" => {
                regime.mean_offset = v
                    .split(',')
                    .map(|x| x.parse().map_err(|_| bad("offset")))
                    .collect::<Result<_>>()?;
            }
            "ar" => regime.ar_coeff = v.parse().map_err(|_| bad("ar"))?,
            "noise" => regime.noise_scale = v.parse().map_err(|_| bad("noise"))?,
            "missing" => regime.missing_rate = v.parse().map_err(|_| bad("missing"))?,
            other => {
                return Err(Error::Parse {
                    line: item.line,
                    msg: format!("unknown regime field {other:?}"),
                })
            }
        }
    }
    if !saw_start {
        return Err(Error::Parse { line: item.line, msg: "regime missing start=".into() });
    }
    Ok(regime)
}

fn parse_seeds(item: &RawItem) -> Result<Vec<u64>> {
    item.value
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| Error::Parse {
                line: item.line,
                msg: format!("bad seed {:?}", s.trim()),
            })
        })
        .collect()
}

fn keyword<T: Copy>(item: &RawItem, table: &[(&str, T)]) -> Result<T> {
    for (name, v) in table {
        if item.value == *name {
            return Ok(*v);
        }
    }
    let options: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
    Err(Error::Parse {
        line: item.line,
        msg: format!("{:?} is not one of {:?} for key {:?}", item.value, options, item.key),
    })
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let sections = scan_sections(text)?;
    let known = ["data", "grid", "scenario", "split", "forecaster", "ue", "engine", "run"];
    for s in &sections {
        if !known.contains(&s.name.as_str()) {
            return Err(Error::Parse {
                line: s.line,
                msg: format!("unknown section [{}]", s.name),
            });
        }
    }
    let find = |name: &str| sections.iter().find(|s| s.name == name);

    let grid_raw = find("grid")
        .ok_or_else(|| Error::Parse { line: 1, msg: "missing [grid] section".into() })?;
    let mut grid_s = SectionView::new(grid_raw);
    let grid = GridSpec {
        l_in: parse_scalar(grid_s.require("l_in")?)?,
        l_out: parse_scalar(grid_s.require("l_out")?)?,
        window_start: parse_scalar(grid_s.require("window_start")?)?,
        window_end: parse_scalar(grid_s.require("window_end")?)?,
    };
    let n_vars: usize = parse_scalar(grid_s.require("n_vars")?)?;
    grid_s.finish()?;

    let data_raw = find("data")
        .ok_or_else(|| Error::Parse { line: 1, msg: "missing [data] section".into() })?;
    let mut data_s = SectionView::new(data_raw);
    let source = data_s.require("source")?.value.clone();
    let data = match source.as_str() {
        "jsonl" => {
            let path = data_s.require("path")?.value.clone();
            DataSource::Jsonl(PathBuf::from(path))
        }
        "scenario" => {
            let sc_raw = find("scenario").ok_or_else(|| Error::Parse {
                line: data_raw.line,
                msg: "source = scenario requires a [scenario] section".into(),
            })?;
            let mut sc_s = SectionView::new(sc_raw);
            let n_samples = parse_scalar(sc_s.require("n_samples")?)?;
            let seed = parse_scalar(sc_s.require("seed")?)?;
            let mut regimes = Vec::new();
            for i in 0.. {
                match sc_s.get(&format!("regime.{i}")) {
                    Some(item) => regimes.push(parse_regime(item)?),
                    None => break,
                }
            }
            if regimes.is_empty() {
                return Err(Error::Parse {
                    line: sc_raw.line,
                    msg: "[scenario] declares no regime.0".into(),
                });
            }
            sc_s.finish()?;
            DataSource::Scenario { n_samples, seed, regimes }
        }
        other => {
            return Err(Error::Parse {
                line: data_raw.line,
                msg: format!("data source must be jsonl or scenario, got {other:?}"),
            })
        }
    };
    if source != "scenario" {
        if let Some(s) = find("scenario") {
            return Err(Error::Parse {
                line: s.line,
                msg: "[scenario] section present but source is not scenario".into(),
            });
        }
    }
    data_s.finish()?;

    let default_split = SplitSpec::default();
    let split = match find("split") {
        None => default_split,
        Some(raw) => {
            let mut s = SectionView::new(raw);
            let split = SplitSpec {
                train_frac: s.parse_with("train", default_split.train_frac)?,
                valid_frac: s.parse_with("valid", default_split.valid_frac)?,
            };
            s.finish()?;
            split
        }
    };

    let mut forecaster_kind = "linear_grid".to_string();
    let mut forecaster_ckpt = None;
    let mut forecaster_train =
        TrainSection { lr: 1e-2, batch_size: 32, max_epochs: 300, patience: 5 };
    if let Some(raw) = find("forecaster") {
        let mut s = SectionView::new(raw);
        if let Some(kind) = s.str_opt("kind") {
            forecaster_kind = kind;
        }
        forecaster_ckpt = s.str_opt("checkpoint").map(PathBuf::from);
        forecaster_train = TrainSection {
            lr: s.parse_with("lr", forecaster_train.lr)?,
            batch_size: s.parse_with("batch_size", forecaster_train.batch_size)?,
            max_epochs: s.parse_with("max_epochs", forecaster_train.max_epochs)?,
            patience: s.parse_with("patience", forecaster_train.patience)?,
        };
        s.finish()?;
    }

    let mut ue_ckpt = None;
    let mut ue_train = TrainSection { lr: 1e-3, batch_size: 32, max_epochs: 300, patience: 10 };
    if let Some(raw) = find("ue") {
        let mut s = SectionView::new(raw);
        ue_ckpt = s.str_opt("checkpoint").map(PathBuf::from);
        ue_train = TrainSection {
            lr: s.parse_with("lr", ue_train.lr)?,
            batch_size: s.parse_with("batch_size", ue_train.batch_size)?,
            max_epochs: s.parse_with("max_epochs", ue_train.max_epochs)?,
            patience: s.parse_with("patience", ue_train.patience)?,
        };
        s.finish()?;
    }

    let mut engine = EngineConfig::default();
    if let Some(raw) = find("engine") {
        let mut s = SectionView::new(raw);
        if let Some(item) = s.get("mode") {
            engine.mode = Mode::parse(&item.value)
                .map_err(|e| Error::Parse { line: item.line, msg: e.to_string() })?;
        }
        engine.inner_steps = s.parse_with("inner_steps", engine.inner_steps)?;
        engine.lr_reliable = s.parse_with("lr_reliable", engine.lr_reliable)?;
        engine.lr_unreliable = s.parse_with("lr_unreliable", engine.lr_unreliable)?;
        engine.lr_ue = s.parse_with("lr_ue", engine.lr_ue)?;
        engine.alpha_alloc = s.parse_with("alpha_alloc", engine.alpha_alloc)?;
        engine.kappa_alloc = s.parse_with("kappa_alloc", engine.kappa_alloc)?;
        engine.alpha_trig = s.parse_with("alpha_trig", engine.alpha_trig)?;
        engine.kappa_trig = s.parse_with("kappa_trig", engine.kappa_trig)?;
        engine.batch_size = s.parse_with("batch_size", engine.batch_size)?;
        engine.random_trigger_p = s.parse_with("random_trigger_p", engine.random_trigger_p)?;
        if let Some(item) = s.get("loss_norm") {
            engine.loss_norm =
                keyword(item, &[("raw", LossNorm::Raw), ("per_obs", LossNorm::PerObs)])?;
        }
        if let Some(item) = s.get("input_cali") {
            engine.input_cali =
                keyword(item, &[("full_grad", InputCali::FullGrad), ("frozen", InputCali::Frozen)])?;
        }
        if let Some(item) = s.get("range_mode") {
            engine.range_mode = keyword(
                item,
                &[("frozen", RangeMode::Frozen), ("expanding", RangeMode::Expanding)],
            )?;
        }
        if let Some(item) = s.get("ue_target") {
            engine.ue_target = keyword(
                item,
                &[("pre_update", UeTarget::PreUpdate), ("post_update", UeTarget::PostUpdate)],
            )?;
        }
        s.finish()?;
    }

    let mut out_dir = PathBuf::from("out");
    let mut seeds = vec![0u64];
    if let Some(raw) = find("run") {
        let mut s = SectionView::new(raw);
        if let Some(dir) = s.str_opt("out") {
            out_dir = PathBuf::from(dir);
        }
        if let Some(item) = s.get("seeds") {
            seeds = parse_seeds(item)?;
        }
        s.finish()?;
    }

    let cfg = RunConfig {
        data,
        grid,
        n_vars,
        split,
        forecaster_kind,
        forecaster_ckpt,
        forecaster_train,
        ue_ckpt,
        ue_train,
        engine,
        out_dir,
        seeds,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

// ---------------------------------------------------------- serialization

fn regime_line(r: &Regime) -> String {
    let offset =
        r.mean_offset.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    format!(
        "start={} offset={} ar={} noise={} missing={}",
        r.start_frac, offset, r.ar_coeff, r.noise_scale, r.missing_rate
    )
}

/// Canonical text form: fixed section order, every effective value written
/// out explicitly.
pub fn to_text(cfg: &RunConfig) -> String {
    let mut t = String::new();
    t.push_str("[data]\n");
    match &cfg.data {
        DataSource::Jsonl(path) => {
            t.push_str("source = jsonl\n");
            let _ = writeln!(t, "path = {}", path.display());
        }
        DataSource::Scenario { .. } => t.push_str("source = scenario\n"),
    }

    t.push_str("\n[grid]\n");
    let _ = writeln!(t, "l_in = {}", cfg.grid.l_in);
    let _ = writeln!(t, "l_out = {}", cfg.grid.l_out);
    let _ = writeln!(t, "n_vars = {}", cfg.n_vars);
    let _ = writeln!(t, "window_start = {}", cfg.grid.window_start);
    let _ = writeln!(t, "window_end = {}", cfg.grid.window_end);

    if let DataSource::Scenario { n_samples, seed, regimes } = &cfg.data {
        t.push_str("\n[scenario]\n");
        let _ = writeln!(t, "n_samples = {n_samples}");
        let _ = writeln!(t, "seed = {seed}");
        for (i, r) in regimes.iter().enumerate() {
            let _ = writeln!(t, "regime.{i} = {}", regime_line(r));
        }
    }

    t.push_str("\n[split]\n");
    let _ = writeln!(t, "train = {}", cfg.split.train_frac);
    let _ = writeln!(t, "valid = {}", cfg.split.valid_frac);

    t.push_str("\n[forecaster]\n");
    let _ = writeln!(t, "kind = {}", cfg.forecaster_kind);
    if let Some(p) = &cfg.forecaster_ckpt {
        let _ = writeln!(t, "checkpoint = {}", p.display());
    }
    let f = &cfg.forecaster_train;
    let _ = writeln!(t, "lr = {}", f.lr);
    let _ = writeln!(t, "batch_size = {}", f.batch_size);
    let _ = writeln!(t, "max_epochs = {}", f.max_epochs);
    let _ = writeln!(t, "patience = {}", f.patience);

    t.push_str("\n[ue]\n");
    if let Some(p) = &cfg.ue_ckpt {
        let _ = writeln!(t, "checkpoint = {}", p.display());
    }
    let u = &cfg.ue_train;
    let _ = writeln!(t, "lr = {}", u.lr);
    let _ = writeln!(t, "batch_size = {}", u.batch_size);
    let _ = writeln!(t, "max_epochs = {}", u.max_epochs);
    let _ = writeln!(t, "patience = {}", u.patience);

    t.push_str("\n[engine]\n");
    let e = &cfg.engine;
    let _ = writeln!(t, "mode = {}", e.mode.as_str());
    let _ = writeln!(t, "inner_steps = {}", e.inner_steps);
    let _ = writeln!(t, "lr_reliable = {}", e.lr_reliable);
    let _ = writeln!(t, "lr_unreliable = {}", e.lr_unreliable);
    let _ = writeln!(t, "lr_ue = {}", e.lr_ue);
    let _ = writeln!(t, "alpha_alloc = {}", e.alpha_alloc);
    let _ = writeln!(t, "kappa_alloc = {}", e.kappa_alloc);
    let _ = writeln!(t, "alpha_trig = {}", e.alpha_trig);
    let _ = writeln!(t, "kappa_trig = {}", e.kappa_trig);
    let _ = writeln!(t, "batch_size = {}", e.batch_size);
    let _ = writeln!(t, "random_trigger_p = {}", e.random_trigger_p);
    let _ = writeln!(
        t,
        "loss_norm = {}",
        match e.loss_norm {
            LossNorm::Raw => "raw",
            LossNorm::PerObs => "per_obs",
        }
    );
    let _ = writeln!(
        t,
        "input_cali = {}",
        match e.input_cali {
            InputCali::FullGrad => "full_grad",
            InputCali::Frozen => "frozen",
        }
    );
    let _ = writeln!(
        t,
        "range_mode = {}",
        match e.range_mode {
            RangeMode::Frozen => "frozen",
            RangeMode::Expanding => "expanding",
        }
    );
    let _ = writeln!(
        t,
        "ue_target = {}",
        match e.ue_target {
            UeTarget::PreUpdate => "pre_update",
            UeTarget::PostUpdate => "post_update",
        }
    );

    t.push_str("\n[run]\n");
    let _ = writeln!(t, "out = {}", cfg.out_dir.display());
    let seeds = cfg.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
    let _ = writeln!(t, "seeds = {seeds}");
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: &str = "\
# synthetic two-regime stream
[data]
source = scenario

[grid]
l_in = 16
l_out = 4
n_vars = 4
window_start = 0
window_end = 20

[scenario]
n_samples = 600
seed = 42
regime.0 = start=0 offset=0 ar=0.6 noise=1 missing=0.3
regime.1 = start=0.5 offset=2.5,1.5,0,0 ar=0.6 noise=1 missing=0.5

[engine]
mode = full
kappa_trig = 0.75   # trigger sensitivity

[run]
out = runs/demo
seeds = 1,2,3
";

    #[test]
    fn parses_a_full_config() {
        let cfg = parse_config(SAMPLE).unwrap();
        assert_eq!(cfg.grid.l_in, 16);
        assert_eq!(cfg.n_vars, 4);
        let sc = cfg.scenario().unwrap();
        assert_eq!(sc.n_samples, 600);
        assert_eq!(sc.regimes.len(), 2);
        assert_eq!(sc.regimes[1].mean_offset, vec![2.5, 1.5, 0.0, 0.0]);
        assert_eq!(sc.regimes[1].missing_rate, 0.5);
        assert_eq!(cfg.engine.mode, Mode::Full);
        assert_eq!(cfg.engine.kappa_trig, 0.75);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/demo"));
        // Untouched keys keep their defaults.
        assert_eq!(cfg.engine.inner_steps, 5);
        assert_eq!(cfg.split, SplitSpec::default());
        assert_eq!(cfg.forecaster_kind, "linear_grid");
    }

    #[test]
    fn jsonl_source_needs_a_path() {
        let text = "[data]\nsource = jsonl\n[grid]\nl_in = 4\nl_out = 2\nn_vars = 1\nwindow_start = 0\nwindow_end = 6\n";
        let err = parse_config(text).err().unwrap();
        assert!(err.to_string().contains("path"), "{err}");

        let ok = format!("{}path = data/x.jsonl\n", &text[..text.find("[grid]").unwrap()])
            + &text[text.find("[grid]").unwrap()..];
        let cfg = parse_config(&ok).unwrap();
        assert_eq!(cfg.data, DataSource::Jsonl(PathBuf::from("data/x.jsonl")));
    }

    #[test]
    fn rejects_unknown_and_duplicate_entries() {
        let bad_key = SAMPLE.replace("mode = full", "modee = full");
        let err = parse_config(&bad_key).err().unwrap();
        assert!(err.to_string().contains("modee"), "{err}");

        let bad_section = SAMPLE.replace("[run]", "[rnu]");
        assert!(parse_config(&bad_section).is_err());

        let dup = SAMPLE.replace("mode = full", "mode = full\nmode = frozen");
        let err = parse_config(&dup).err().unwrap();
        assert!(err.to_string().contains("duplicate"), "{err}");

        let orphan = "x = 1\n".to_string() + SAMPLE;
        assert!(parse_config(&orphan).is_err());
    }

    #[test]
    fn rejects_semantic_nonsense() {
        // Regimes out of order get through parsing but fail validation.
        let swapped = SAMPLE
            .replace("regime.0 = start=0 ", "regime.0 = start=0.5 ")
            .replace("regime.1 = start=0.5 ", "regime.1 = start=0 ");
        assert!(parse_config(&swapped).is_err());

        let bad_mode = SAMPLE.replace("mode = full", "mode = sideways");
        let err = parse_config(&bad_mode).err().unwrap();
        assert!(err.to_string().contains("sideways"), "{err}");

        let bad_p = SAMPLE.replace("kappa_trig = 0.75", "random_trigger_p = 1.5");
        assert!(parse_config(&bad_p).is_err());

        // NaN parses as a float but fails validation wherever it lands.
        let nan_offset = SAMPLE.replace("offset=2.5,1.5,0,0", "offset=2.5,NaN,0,0");
        assert!(parse_config(&nan_offset).is_err());
        let nan_kappa = SAMPLE.replace("kappa_trig = 0.75", "kappa_trig = NaN");
        assert!(parse_config(&nan_kappa).is_err());
    }

    #[test]
    fn regime_fields_have_defaults_but_start_is_required() {
        let minimal = SAMPLE.replace(
            "regime.1 = start=0.5 offset=2.5,1.5,0,0 ar=0.6 noise=1 missing=0.5",
            "regime.1 = start=0.5",
        );
        let cfg = parse_config(&minimal).unwrap();
        let r = &cfg.scenario().unwrap().regimes[1];
        assert_eq!(r.mean_offset, vec![0.0]);
        assert_eq!(r.noise_scale, 1.0);

        let no_start = SAMPLE.replace(
            "regime.1 = start=0.5 offset=2.5,1.5,0,0 ar=0.6 noise=1 missing=0.5",
            "regime.1 = offset=1",
        );
        assert!(parse_config(&no_start).is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = parse_config(SAMPLE).unwrap();
        let text = to_text(&cfg);
        let reparsed = parse_config(&text).unwrap();
        assert_eq!(reparsed, cfg);
        // And the canonical form is a fixed point.
        assert_eq!(to_text(&reparsed), text);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_survives_arbitrary_values(
            l_in in 1usize..40,
            l_out in 1usize..10,
            n_vars in 1usize..6,
            lr in 1e-6f64..1.0,
            kappa in -2.0f64..5.0,
            p in 0.0f64..1.0,
            seeds in proptest::collection::vec(any::<u64>(), 1..5),
            offset_pool in proptest::collection::vec(-10.0f64..10.0, 6),
            broadcast in any::<bool>(),
            missing in 0.0f64..0.95,
        ) {
            let offset: Vec<f64> =
                offset_pool[..if broadcast { 1 } else { n_vars }].to_vec();
            let cfg = RunConfig {
                data: DataSource::Scenario {
                    n_samples: 100,
                    seed: 9,
                    regimes: vec![Regime {
                        start_frac: 0.0,
                        mean_offset: offset,
                        ar_coeff: 0.5,
                        noise_scale: 1.0,
                        missing_rate: missing,
                    }],
                },
                grid: GridSpec {
                    l_in,
                    l_out,
                    window_start: 0.0,
                    window_end: (l_in + l_out) as f64,
                },
                n_vars,
                split: SplitSpec::default(),
                forecaster_kind: "locf".into(),
                forecaster_ckpt: Some(PathBuf::from("out/f.ckpt")),
                forecaster_train: TrainSection { lr, batch_size: 8, max_epochs: 11, patience: 2 },
                ue_ckpt: None,
                ue_train: TrainSection { lr, batch_size: 16, max_epochs: 7, patience: 3 },
                engine: EngineConfig {
                    lr_reliable: lr,
                    kappa_trig: kappa,
                    random_trigger_p: p,
                    ..EngineConfig::default()
                },
                out_dir: PathBuf::from("runs/x"),
                seeds,
            };
            let reparsed = parse_config(&to_text(&cfg)).unwrap();
            prop_assert_eq!(reparsed, cfg);
        }
    }
}
