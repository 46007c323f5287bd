//! Unbalanced asset panels, macro series, news embeddings and their file formats.
//!
//! Returns are keyed at decision time: the row for period `t` carries the
//! excess return realized over `t → t+1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use crate::config::parse_kv;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AssetObservation {
    pub period: i64,
    pub asset_id: String,
    pub excess_return_next: f64,
    /// `None` marks a missing characteristic.
    pub characteristics: Vec<Option<f64>>,
}

impl AssetObservation {
    pub fn is_complete(&self) -> bool {
        self.characteristics.iter().all(Option::is_some)
    }
}

/// Observations sorted by `(period, asset_id)` with cached counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    char_names: Vec<String>,
    observations: Vec<AssetObservation>,
    periods: Vec<i64>,
    ranges: Vec<Range<usize>>,
    asset_counts: BTreeMap<String, usize>,
}

impl Panel {
    pub fn new(char_names: Vec<String>, mut observations: Vec<AssetObservation>) -> Result<Self> {
        let d = char_names.len();
        for o in &observations {
            if o.characteristics.len() != d {
                return Err(Error::data(
                    "panel",
                    None,
                    format!(
                        "({}, {}) has {} characteristics, expected {d}",
                        o.period,
                        o.asset_id,
                        o.characteristics.len()
                    ),
                ));
            }
            if !o.excess_return_next.is_finite() || o.characteristics.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::data(
                    "panel",
                    None,
                    format!("({}, {}) holds a non-finite value", o.period, o.asset_id),
                ));
            }
        }
        observations.sort_by(|a, b| (a.period, &a.asset_id).cmp(&(b.period, &b.asset_id)));
        if let Some(w) = observations
            .windows(2)
            .find(|w| w[0].period == w[1].period && w[0].asset_id == w[1].asset_id)
        {
            return Err(Error::data(
                "panel",
                None,
                format!("duplicate key ({}, {})", w[0].period, w[0].asset_id),
            ));
        }
        let mut periods = Vec::new();
        let mut ranges = Vec::new();
        let mut asset_counts = BTreeMap::new();
        let mut start = 0;
        for i in 0..observations.len() {
            *asset_counts.entry(observations[i].asset_id.clone()).or_insert(0) += 1;
            if i + 1 == observations.len() || observations[i + 1].period != observations[i].period {
                periods.push(observations[i].period);
                ranges.push(start..i + 1);
                start = i + 1;
            }
        }
        Ok(Panel {
            char_names,
            observations,
            periods,
            ranges,
            asset_counts,
        })
    }

    pub fn char_names(&self) -> &[String] {
        &self.char_names
    }

    pub fn n_chars(&self) -> usize {
        self.char_names.len()
    }

    pub fn observations(&self) -> &[AssetObservation] {
        &self.observations
    }

    /// Periods with at least one observation, strictly increasing.
    pub fn periods(&self) -> &[i64] {
        &self.periods
    }

    /// Number of periods, `T`.
    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Observations of the `idx`-th period, sorted by asset id.
    pub fn period_slice(&self, idx: usize) -> &[AssetObservation] {
        &self.observations[self.ranges[idx].clone()]
    }

    pub fn by_period(&self) -> impl Iterator<Item = (i64, &[AssetObservation])> {
        self.periods
            .iter()
            .zip(&self.ranges)
            .map(move |(&p, r)| (p, &self.observations[r.clone()]))
    }

    /// `N_t` of the `idx`-th period.
    pub fn n_assets_in(&self, idx: usize) -> usize {
        self.ranges[idx].len()
    }

    /// `T_i` per asset id.
    pub fn asset_counts(&self) -> &BTreeMap<String, usize> {
        &self.asset_counts
    }

    pub fn t_i(&self, asset_id: &str) -> usize {
        self.asset_counts.get(asset_id).copied().unwrap_or(0)
    }

    /// Sub-panel of observations whose period lies in `[start, end]`.
    pub fn restrict(&self, start: i64, end: i64) -> Panel {
        let obs = self
            .observations
            .iter()
            .filter(|o| o.period >= start && o.period <= end)
            .cloned()
            .collect();
        Panel::new(self.char_names.clone(), obs).expect("a subset of a valid panel is valid")
    }

    pub fn filter(&self, keep: impl Fn(&AssetObservation) -> bool) -> Panel {
        let obs = self.observations.iter().filter(|o| keep(o)).cloned().collect();
        Panel::new(self.char_names.clone(), obs).expect("a subset of a valid panel is valid")
    }

    /// Splits by closed period intervals. Observations outside every range are left out.
    pub fn split(&self, spec: &SplitSpec) -> Result<(Panel, Panel, Panel)> {
        let (Some(&first), Some(&last)) = (self.periods.first(), self.periods.last()) else {
            return Err(Error::InvalidArgument("cannot split an empty panel".into()));
        };
        if spec.train.0 < first || spec.test.1 > last {
            return Err(Error::InvalidArgument(format!(
                "split {spec} exceeds panel periods {first}..={last}"
            )));
        }
        Ok((
            self.restrict(spec.train.0, spec.train.1),
            self.restrict(spec.val.0, spec.val.1),
            self.restrict(spec.test.0, spec.test.1),
        ))
    }
}

/// Closed, ordered, non-overlapping train/validation/test period intervals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: (i64, i64),
    pub val: (i64, i64),
    pub test: (i64, i64),
}

impl std::fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "train {}..={}, val {}..={}, test {}..={}",
            self.train.0, self.train.1, self.val.0, self.val.1, self.test.0, self.test.1
        )
    }
}

impl SplitSpec {
    pub fn new(train: (i64, i64), val: (i64, i64), test: (i64, i64)) -> Result<Self> {
        for (name, (a, b)) in [("train", train), ("validation", val), ("test", test)] {
            if a > b {
                return Err(Error::InvalidArgument(format!("{name} range {a}..={b} is empty")));
            }
        }
        if train.1 >= val.0 || val.1 >= test.0 {
            return Err(Error::InvalidArgument(format!(
                "split ranges overlap or are out of order: train {}..={}, val {}..={}, test {}..={}",
                train.0, train.1, val.0, val.1, test.0, test.1
            )));
        }
        Ok(SplitSpec { train, val, test })
    }

    /// Parses a sidecar of `key = value` lines with the six range keys.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut vals = BTreeMap::new();
        for entry in parse_kv(text, source)? {
            let known = ["train_start", "train_end", "val_start", "val_end", "test_start", "test_end"];
            if !known.contains(&entry.key.as_str()) {
                return Err(Error::Config(format!("{source} line {}: unknown key `{}`", entry.line, entry.key)));
            }
            let v: i64 = entry.value.parse().map_err(|_| {
                Error::Config(format!("{source} line {}: `{}` is not an integer", entry.line, entry.value))
            })?;
            vals.insert(entry.key, v);
        }
        let get = |k: &str| {
            vals.get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("{source}: missing key `{k}`")))
        };
        SplitSpec::new(
            (get("train_start")?, get("train_end")?),
            (get("val_start")?, get("val_end")?),
            (get("test_start")?, get("test_end")?),
        )
    }

    pub fn range(&self, which: SplitName) -> (i64, i64) {
        match which {
            SplitName::Train => self.train,
            SplitName::Val => self.val,
            SplitName::Test => self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train | val | test)"))),
        }
    }
}

/// Contiguous macro indicator series.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroSeries {
    names: Vec<String>,
    first_period: i64,
    values: Vec<Vec<f64>>,
}

impl MacroSeries {
    pub fn new(names: Vec<String>, first_period: i64, values: Vec<Vec<f64>>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::data("macro", None, "no series"));
        }
        for (k, row) in values.iter().enumerate() {
            if row.len() != names.len() {
                return Err(Error::data(
                    "macro",
                    None,
                    format!("period {} has {} values, expected {}", first_period + k as i64, row.len(), names.len()),
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(
                    "macro",
                    None,
                    format!("period {} holds a non-finite value", first_period + k as i64),
                ));
            }
        }
        Ok(MacroSeries {
            names,
            first_period,
            values,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn first_period(&self) -> i64 {
        self.first_period
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, period: i64) -> Option<&[f64]> {
        let k = usize::try_from(period - self.first_period).ok()?;
        self.values.get(k).map(Vec::as_slice)
    }

    /// Rows `t − k ..= t`, oldest first, if all are present.
    pub fn window(&self, period: i64, k: usize) -> Option<Vec<&[f64]>> {
        (0..=k as i64).rev().map(|back| self.get(period - back)).collect()
    }
}

/// News sentence embeddings keyed by `(period, asset_id)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    map: BTreeMap<(i64, String), Vec<Vec<f64>>>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        EmbeddingSet {
            dim,
            map: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, period: i64, asset_id: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::data(
                "embeddings",
                None,
                format!("vector of length {} for dim={}", v.len(), self.dim),
            ));
        }
        self.map.entry((period, asset_id.to_string())).or_default().push(v);
        Ok(())
    }

    /// Sentence vectors of `(period, asset)`; empty when absent.
    pub fn get(&self, period: i64, asset_id: &str) -> &[Vec<f64>] {
        self.map
            .get(&(period, asset_id.to_string()))
            .map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, &str, &[Vec<f64>])> {
        self.map.iter().map(|((p, a), v)| (*p, a.as_str(), v.as_slice()))
    }

    pub fn n_sentences(&self) -> usize {
        self.map.values().map(Vec::len).sum()
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file))
}

fn name_of(path: &Path) -> String {
    path.display().to_string()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    Error::data(name_of(path), line, e.to_string())
}

fn parse_f64(path: &Path, line: u64, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::data(name_of(path), Some(line), format!("{what}: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::data(name_of(path), Some(line), format!("{what}: non-finite value")));
    }
    Ok(v)
}

fn parse_period(path: &Path, line: u64, field: &str) -> Result<i64> {
    field
        .parse()
        .map_err(|_| Error::data(name_of(path), Some(line), format!("period `{field}` is not an integer")))
}

fn expect_header(path: &Path, got: &csv::StringRecord, prefix: &[&str]) -> Result<Vec<String>> {
    let got: Vec<&str> = got.iter().collect();
    if got.len() < prefix.len() || got[..prefix.len()] != *prefix {
        return Err(Error::data(
            name_of(path),
            Some(1),
            format!("header must start with `{}`, found `{}`", prefix.join(","), got.join(",")),
        ));
    }
    Ok(got[prefix.len()..].iter().map(|s| s.to_string()).collect())
}

/// Joins a returns file and a characteristics file on `(period, asset_id)`.
pub fn load_panel(returns_path: &Path, chars_path: &Path) -> Result<Panel> {
    let mut rdr = reader(returns_path)?;
    let header = rdr.headers().map_err(|e| csv_err(returns_path, e))?.clone();
    let extra = expect_header(returns_path, &header, &["period", "asset_id", "excess_return_next"])?;
    if !extra.is_empty() {
        return Err(Error::data(name_of(returns_path), Some(1), "unexpected extra columns"));
    }
    let mut returns: BTreeMap<(i64, String), Option<f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(returns_path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(Error::data(name_of(returns_path), Some(line), format!("expected 3 fields, found {}", rec.len())));
        }
        let period = parse_period(returns_path, line, &rec[0])?;
        let asset = rec[1].to_string();
        if asset.is_empty() {
            return Err(Error::data(name_of(returns_path), Some(line), "empty asset_id"));
        }
        let r = if rec[2].is_empty() {
            None
        } else {
            Some(parse_f64(returns_path, line, &rec[2], "excess_return_next")?)
        };
        if returns.insert((period, asset.clone()), r).is_some() {
            return Err(Error::data(
                name_of(returns_path),
                Some(line),
                format!("duplicate key ({period}, {asset})"),
            ));
        }
    }

    let mut rdr = reader(chars_path)?;
    let header = rdr.headers().map_err(|e| csv_err(chars_path, e))?.clone();
    let names = expect_header(chars_path, &header, &["period", "asset_id"])?;
    let mut seen = BTreeSet::new();
    let mut observations = Vec::new();
    let mut dropped = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(chars_path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() + 2 {
            return Err(Error::data(
                name_of(chars_path),
                Some(line),
                format!("expected {} fields, found {}", names.len() + 2, rec.len()),
            ));
        }
        let period = parse_period(chars_path, line, &rec[0])?;
        let asset = rec[1].to_string();
        if !seen.insert((period, asset.clone())) {
            return Err(Error::data(
                name_of(chars_path),
                Some(line),
                format!("duplicate key ({period}, {asset})"),
            ));
        }
        let characteristics = (2..rec.len())
            .map(|j| {
                if rec[j].is_empty() {
                    Ok(None)
                } else {
                    parse_f64(chars_path, line, &rec[j], &names[j - 2]).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        match returns.remove(&(period, asset.clone())) {
            Some(Some(r)) => observations.push(AssetObservation {
                period,
                asset_id: asset,
                excess_return_next: r,
                characteristics,
            }),
            Some(None) | None => dropped += 1,
        }
    }
    dropped += returns.len();
    if dropped > 0 {
        log::info!("load_panel: dropped {dropped} rows without both a next-period return and characteristics");
    }
    Panel::new(names, observations)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes the two panel files. Floats use shortest round-trip formatting.
pub fn write_panel(panel: &Panel, returns_path: &Path, chars_path: &Path) -> Result<()> {
    let mut out = create(returns_path)?;
    let io = |e| Error::io(returns_path, e);
    writeln!(out, "period,asset_id,excess_return_next").map_err(io)?;
    for o in panel.observations() {
        writeln!(out, "{},{},{}", o.period, o.asset_id, o.excess_return_next).map_err(io)?;
    }
    out.flush().map_err(io)?;

    let mut out = create(chars_path)?;
    let io = |e| Error::io(chars_path, e);
    write!(out, "period,asset_id").map_err(io)?;
    for n in panel.char_names() {
        write!(out, ",{n}").map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    for o in panel.observations() {
        write!(out, "{},{}", o.period, o.asset_id).map_err(io)?;
        for c in &o.characteristics {
            write!(out, ",{}", fmt_opt(*c)).map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn load_macro(path: &Path) -> Result<MacroSeries> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let names = expect_header(path, &header, &["period"])?;
    let mut first = None;
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() + 1 {
            return Err(Error::data(
                name_of(path),
                Some(line),
                format!("expected {} fields, found {}", names.len() + 1, rec.len()),
            ));
        }
        let period = parse_period(path, line, &rec[0])?;
        let start = *first.get_or_insert(period);
        if period != start + values.len() as i64 {
            return Err(Error::data(
                name_of(path),
                Some(line),
                format!("period {period} breaks the contiguous series (expected {})", start + values.len() as i64),
            ));
        }
        let row = (1..rec.len())
            .map(|j| parse_f64(path, line, &rec[j], &names[j - 1]))
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    let first = first.ok_or_else(|| Error::data(name_of(path), None, "no rows"))?;
    MacroSeries::new(names, first, values)
}

pub fn write_macro(series: &MacroSeries, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    write!(out, "period").map_err(io)?;
    for n in series.names() {
        write!(out, ",{n}").map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    for (k, row) in series.values.iter().enumerate() {
        write!(out, "{}", series.first_period + k as i64).map_err(io)?;
        for v in row {
            write!(out, ",{v}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a `dim=<d>` line followed by CSV rows
/// `period,asset_id,sentence_index,v_1,...,v_d` (a column header row is optional).
pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = BufReader::new(file);
    let mut line = String::new();
    let mut header_line = 0u64;
    let dim = loop {
        line.clear();
        header_line += 1;
        if buf.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::data(name_of(path), None, "missing `dim=` header"));
        }
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let d = t
            .strip_prefix("dim=")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::data(name_of(path), Some(header_line), format!("expected `dim=<positive integer>`, found `{t}`")))?;
        break d;
    };

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(buf);
    let mut rows: BTreeMap<(i64, String), Vec<(i64, Vec<f64>, u64)>> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = header_line + rec.position().map_or(0, |p| p.line());
        if k == 0 && rec.get(0) == Some("period") {
            continue;
        }
        if rec.len() != dim + 3 {
            return Err(Error::data(
                name_of(path),
                Some(line),
                format!("vector length {} does not match dim={dim}", rec.len().saturating_sub(3)),
            ));
        }
        let period = parse_period(path, line, &rec[0])?;
        let idx: i64 = rec[2]
            .parse()
            .map_err(|_| Error::data(name_of(path), Some(line), format!("sentence_index `{}` is not an integer", &rec[2])))?;
        let v = (3..rec.len())
            .map(|j| parse_f64(path, line, &rec[j], "embedding"))
            .collect::<Result<Vec<_>>>()?;
        rows.entry((period, rec[1].to_string())).or_default().push((idx, v, line));
    }
    let mut set = EmbeddingSet::new(dim);
    for ((period, asset), mut list) in rows {
        list.sort_by_key(|(i, _, _)| *i);
        if let Some(w) = list.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::data(
                name_of(path),
                Some(w[1].2),
                format!("duplicate sentence_index {} for ({period}, {asset})", w[1].0),
            ));
        }
        set.map.insert((period, asset), list.into_iter().map(|(_, v, _)| v).collect());
    }
    Ok(set)
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(out, "dim={}", set.dim).map_err(io)?;
    write!(out, "period,asset_id,sentence_index").map_err(io)?;
    for j in 1..=set.dim {
        write!(out, ",v_{j}").map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    for ((period, asset), list) in &set.map {
        for (k, v) in list.iter().enumerate() {
            write!(out, "{period},{asset},{k}").map_err(io)?;
            for x in v {
                write!(out, ",{x}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}
