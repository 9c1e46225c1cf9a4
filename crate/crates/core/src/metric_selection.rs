//! Correlation-guided selection of reward metrics.
//!
//! Metric scores are rank-correlated with human scores per category
//! ([`correlation_table`]). Per category, the metrics whose correlation has
//! dense rank ≤ 3 are counted ([`top3_frequency`]), and the most frequently
//! counted metrics form the reward set ([`select_reward_set`]).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMethod {
    Spearman,
    Kendall,
}

impl CorrelationMethod {
    pub fn apply(self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            CorrelationMethod::Spearman => spearman(x, y),
            CorrelationMethod::Kendall => kendall_tau_b(x, y),
        }
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "correlation inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "need at least two observations".into(),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("correlation input is not finite".into()));
    }
    Ok(())
}

/// Fractional (average) ranks starting at 1.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i..j share the mean of ranks i+1..=j
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Kendall's τ-b in O(n log n) (Knight's merge-sort algorithm).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    let n0 = (n * (n - 1) / 2) as f64;
    let pairs = |len: usize| (len * (len.saturating_sub(1)) / 2) as u64;

    // Ties in x, and joint ties in (x, y).
    let (mut tied_x, mut tied_xy) = (0u64, 0u64);
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        tied_x += pairs(j - i);
        let mut k = i;
        while k < j {
            let mut m = k + 1;
            while m < j && y[idx[m]] == y[idx[k]] {
                m += 1;
            }
            tied_xy += pairs(m - k);
            k = m;
        }
        i = j;
    }

    // Sorting by y now counts the swaps needed: the discordant pairs.
    let mut ys: Vec<f64> = idx.iter().map(|&k| y[k]).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);

    let mut tied_y = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && ys[j] == ys[i] {
            j += 1;
        }
        tied_y += pairs(j - i);
        i = j;
    }

    let n1 = tied_x as f64;
    let n2 = tied_y as f64;
    if n0 == n1 || n0 == n2 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    // concordant − discordant = n0 − n1 − n2 + n3 − 2·swaps
    let numer = n0 - n1 - n2 + tied_xy as f64 - 2.0 * swaps as f64;
    Ok((numer / ((n0 - n1) * (n0 - n2)).sqrt()).clamp(-1.0, 1.0))
}

/// Stable merge sort of `v`, returning the number of strictly inverted pairs.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps =
        merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf[k] = v[j];
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub item_id: String,
    pub category: String,
    pub human: f64,
    /// Aligned with [`ScoreTable::metrics`].
    pub scores: Vec<f64>,
}

/// Human and metric scores per item; `item_id,category,human,<metric>...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub metrics: Vec<String>,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn categories(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.category.as_str()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("item_id,category,human");
        for m in &self.metrics {
            out.push(',');
            out.push_str(&csv_field(m));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}",
                csv_field(&r.item_id),
                csv_field(&r.category),
                r.human
            ));
            for s in &r.scores {
                out.push_str(&format!(",{s}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_records(path: &Path) -> Result<(csv::StringRecord, Vec<(u64, csv::StringRecord)>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].trim().is_empty()) {
        return Err(parse_err(path, 1, "empty file: header row required"));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        rows.push((line, rec));
    }
    Ok((header, rows))
}

fn parse_number(path: &Path, line: u64, column: &str, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| {
            parse_err(
                path,
                line,
                format!("column `{column}`: `{field}` is not a number"),
            )
        })
}

pub fn load_score_table(path: &Path) -> Result<ScoreTable> {
    let (header, records) = read_records(path)?;
    for (pos, required) in ["item_id", "category", "human"].into_iter().enumerate() {
        if header.get(pos).map(str::trim) != Some(required) {
            return Err(parse_err(
                path,
                1,
                format!(
                    "missing column `{required}` (expected at position {})",
                    pos + 1
                ),
            ));
        }
    }
    let metrics: Vec<String> = header
        .iter()
        .skip(3)
        .map(|s| s.trim().to_string())
        .collect();
    if metrics.is_empty() {
        return Err(parse_err(path, 1, "no metric columns"));
    }
    let mut rows = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let human = parse_number(path, line, "human", &rec[2])?;
        let scores = metrics
            .iter()
            .enumerate()
            .map(|(i, m)| parse_number(path, line, m, &rec[3 + i]))
            .collect::<Result<_>>()?;
        rows.push(ScoreRow {
            item_id: rec[0].to_string(),
            category: rec[1].to_string(),
            human,
            scores,
        });
    }
    Ok(ScoreTable { metrics, rows })
}

/// Correlation of every metric with the human column, per category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub method: CorrelationMethod,
    pub categories: Vec<String>,
    pub metrics: Vec<String>,
    /// Keyed by `(category, metric)`.
    pub entries: BTreeMap<(String, String), f64>,
    /// Pairs whose correlation is undefined, with the reason.
    pub failures: BTreeMap<(String, String), String>,
}

impl CorrelationTable {
    pub fn get(&self, category: &str, metric: &str) -> Option<f64> {
        self.entries
            .get(&(category.to_string(), metric.to_string()))
            .copied()
    }

    /// `category,metric,value`, ordered by category then metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,metric,value\n");
        for ((c, m), v) in &self.entries {
            out.push_str(&format!("{},{},{v}\n", csv_field(c), csv_field(m)));
        }
        out
    }

    /// Reads a `category,metric,value` file. Category and metric order follow
    /// first appearance.
    pub fn load(path: &Path, method: CorrelationMethod) -> Result<Self> {
        let (header, records) = read_records(path)?;
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        if names != ["category", "metric", "value"] {
            return Err(parse_err(
                path,
                1,
                "expected header `category,metric,value`",
            ));
        }
        let mut table = CorrelationTable {
            method,
            categories: Vec::new(),
            metrics: Vec::new(),
            entries: BTreeMap::new(),
            failures: BTreeMap::new(),
        };
        for (line, rec) in records {
            let (c, m) = (rec[0].trim().to_string(), rec[1].trim().to_string());
            let v = parse_number(path, line, "value", &rec[2])?;
            if !(-1.0..=1.0).contains(&v) {
                return Err(parse_err(
                    path,
                    line,
                    format!("correlation {v} outside [-1, 1]"),
                ));
            }
            if !table.categories.contains(&c) {
                table.categories.push(c.clone());
            }
            if !table.metrics.contains(&m) {
                table.metrics.push(m.clone());
            }
            if table.entries.insert((c.clone(), m.clone()), v).is_some() {
                return Err(parse_err(path, line, format!("duplicate entry ({c}, {m})")));
            }
        }
        Ok(table)
    }
}

pub fn correlation_table(scores: &ScoreTable, method: CorrelationMethod) -> CorrelationTable {
    let categories: Vec<String> = scores.categories().into_iter().map(String::from).collect();
    let mut entries = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for cat in &categories {
        let rows: Vec<&ScoreRow> = scores.rows.iter().filter(|r| &r.category == cat).collect();
        let human: Vec<f64> = rows.iter().map(|r| r.human).collect();
        for (j, metric) in scores.metrics.iter().enumerate() {
            let key = (cat.clone(), metric.clone());
            let col: Vec<f64> = rows.iter().map(|r| r.scores[j]).collect();
            match method.apply(&col, &human) {
                Ok(v) => {
                    entries.insert(key, v);
                }
                Err(e) => {
                    failures.insert(key, e.to_string());
                }
            }
        }
    }
    CorrelationTable {
        method,
        categories,
        metrics: scores.metrics.clone(),
        entries,
        failures,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Top3Report {
    /// Keyed by `(category, metric)`.
    pub membership: BTreeMap<(String, String), bool>,
    pub totals: BTreeMap<String, usize>,
    /// Mean correlation per metric over the categories it appears in.
    pub mean_correlation: BTreeMap<String, f64>,
}

impl Top3Report {
    pub fn is_member(&self, category: &str, metric: &str) -> bool {
        self.membership
            .get(&(category.to_string(), metric.to_string()))
            .copied()
            .unwrap_or(false)
    }

    /// `metric,total`
    pub fn totals_csv(&self) -> String {
        let mut out = String::from("metric,total\n");
        for (m, t) in &self.totals {
            out.push_str(&format!("{},{t}\n", csv_field(m)));
        }
        out
    }

    /// `category,metric,member`
    pub fn membership_csv(&self) -> String {
        let mut out = String::from("category,metric,member\n");
        for ((c, m), &b) in &self.membership {
            out.push_str(&format!(
                "{},{},{}\n",
                csv_field(c),
                csv_field(m),
                u8::from(b)
            ));
        }
        out
    }
}

/// Dense-rank top-3 membership of `eligible` metrics in each category.
///
/// Tied correlations share a rank and use up a single rank slot, so a
/// category can have more than three members.
pub fn top3_frequency(table: &CorrelationTable, eligible: &[String]) -> Top3Report {
    let mut membership = BTreeMap::new();
    let mut totals: BTreeMap<String, usize> = eligible.iter().map(|m| (m.clone(), 0)).collect();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();

    for cat in &table.categories {
        let values: Vec<(&String, f64)> = eligible
            .iter()
            .filter_map(|m| table.get(cat, m).map(|v| (m, v)))
            .collect();
        let mut distinct: Vec<f64> = values.iter().map(|&(_, v)| v).collect();
        distinct.sort_by(|a, b| b.total_cmp(a));
        distinct.dedup();
        let cutoff = distinct.get(2).or(distinct.last()).copied();
        for (m, v) in values {
            let member = cutoff.is_some_and(|c| v.total_cmp(&c) != Ordering::Less);
            membership.insert((cat.clone(), m.clone()), member);
            if member {
                *totals.get_mut(m).expect("eligible metric") += 1;
            }
            let e = sums.entry(m.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let mean_correlation = sums
        .into_iter()
        .map(|(m, (s, n))| (m, s / n as f64))
        .collect();
    Top3Report {
        membership,
        totals,
        mean_correlation,
    }
}

/// The `k` metrics with the highest totals. Ties go to the higher mean
/// correlation, then to the lexicographically smaller name.
pub fn select_reward_set(report: &Top3Report, k: usize) -> Result<Vec<String>> {
    if k > report.totals.len() {
        return Err(Error::Config(format!(
            "cannot select {k} metrics out of {}",
            report.totals.len()
        )));
    }
    let mut ranked: Vec<(&String, usize, f64)> = report
        .totals
        .iter()
        .map(|(m, &t)| {
            let mean = report
                .mean_correlation
                .get(m)
                .copied()
                .unwrap_or(f64::NEG_INFINITY);
            (m, t, mean)
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(b.2.total_cmp(&a.2))
            .then_with(|| a.0.cmp(b.0))
    });
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(m, _, _)| m.clone())
        .collect())
}

/// Writes `correlations.csv`, `top3_membership.csv` and `top3_totals.csv`
/// into `dir`.
pub fn write_reports(table: &CorrelationTable, report: &Top3Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("correlations.csv", table.to_csv()),
        ("top3_membership.csv", report.membership_csv()),
        ("top3_totals.csv", report.totals_csv()),
    ];
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn spearman_examples() {
        assert!(close(spearman(&[1., 2., 3.], &[1., 2., 3.]).unwrap(), 1.0));
        assert!(close(spearman(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0));
        assert!(close(
            spearman(&[1., 2., 3., 4.], &[2., 1., 4., 3.]).unwrap(),
            0.6
        ));
    }

    #[test]
    fn kendall_examples() {
        assert!(close(
            kendall_tau_b(&[1., 2., 3.], &[1., 3., 2.]).unwrap(),
            1.0 / 3.0
        ));
        assert!(close(
            kendall_tau_b(&[4., 1., 7.], &[4., 1., 7.]).unwrap(),
            1.0
        ));
        assert!(close(
            kendall_tau_b(&[1., 2., 3.], &[3., 2., 1.]).unwrap(),
            -1.0
        ));
    }

    #[test]
    fn ties_use_average_ranks() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
        // scipy.stats.kendalltau([1,2,2,3],[1,3,2,3]) = 0.8
        assert!(close(
            kendall_tau_b(&[1., 2., 2., 3.], &[1., 3., 2., 3.]).unwrap(),
            0.8
        ));
    }

    #[test]
    fn constant_input_is_undefined() {
        assert!(matches!(
            spearman(&[1., 1., 1.], &[1., 2., 3.]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            kendall_tau_b(&[1., 2., 3.], &[5., 5., 5.]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            spearman(&[1.], &[1.]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            spearman(&[1., 2.], &[1.]),
            Err(Error::Contract(_))
        ));
    }

    fn report_from(values: &[(&str, &str, f64)]) -> (CorrelationTable, Vec<String>) {
        let mut t = CorrelationTable {
            method: CorrelationMethod::Spearman,
            categories: Vec::new(),
            metrics: Vec::new(),
            entries: BTreeMap::new(),
            failures: BTreeMap::new(),
        };
        for &(c, m, v) in values {
            if !t.categories.iter().any(|x| x == c) {
                t.categories.push(c.into());
            }
            if !t.metrics.iter().any(|x| x == m) {
                t.metrics.push(m.into());
            }
            t.entries.insert((c.into(), m.into()), v);
        }
        let metrics = t.metrics.clone();
        (t, metrics)
    }

    #[test]
    fn dense_rank_admits_ties() {
        let (t, m) = report_from(&[
            ("3D", "DSG", 0.427),
            ("3D", "HPS", 0.416),
            ("3D", "BLIP2", 0.416),
            ("3D", "ImageReward", 0.401),
            ("3D", "VQA", 0.339),
            ("3D", "CLIP", 0.315),
        ]);
        let r = top3_frequency(&t, &m);
        let members: Vec<&str> = ["DSG", "HPS", "BLIP2", "ImageReward", "VQA", "CLIP"]
            .into_iter()
            .filter(|x| r.is_member("3D", x))
            .collect();
        assert_eq!(members, ["DSG", "HPS", "BLIP2", "ImageReward"]);
    }

    #[test]
    fn total_tie_makes_everyone_a_member() {
        let (t, m) = report_from(&[
            ("c", "a", 0.3),
            ("c", "b", 0.3),
            ("c", "d", 0.3),
            ("c", "e", 0.3),
        ]);
        let r = top3_frequency(&t, &m);
        assert!(r.totals.values().all(|&v| v == 1));
    }

    #[test]
    fn selection_tiebreaks() {
        let (t, m) = report_from(&[
            ("c", "zeta", 0.9),
            ("c", "alpha", 0.9),
            ("d", "zeta", 0.1),
            ("d", "alpha", 0.5),
        ]);
        let r = top3_frequency(&t, &m);
        // Both totals 2; alpha has the larger mean.
        assert_eq!(select_reward_set(&r, 1).unwrap(), ["alpha"]);

        let zero = Top3Report {
            membership: BTreeMap::new(),
            totals: [("m3", 0), ("m1", 0), ("m2", 0)]
                .into_iter()
                .map(|(a, b)| (a.to_string(), b))
                .collect(),
            mean_correlation: BTreeMap::new(),
        };
        assert_eq!(select_reward_set(&zero, 2).unwrap(), ["m1", "m2"]);
        assert!(select_reward_set(&zero, 4).is_err());
    }

    #[test]
    fn correlation_table_flags_small_categories() {
        let table = ScoreTable {
            metrics: vec!["m".into()],
            rows: vec![
                ScoreRow {
                    item_id: "1".into(),
                    category: "solo".into(),
                    human: 0.5,
                    scores: vec![0.1],
                },
                ScoreRow {
                    item_id: "2".into(),
                    category: "pair".into(),
                    human: 0.5,
                    scores: vec![0.1],
                },
                ScoreRow {
                    item_id: "3".into(),
                    category: "pair".into(),
                    human: 0.7,
                    scores: vec![0.3],
                },
            ],
        };
        let c = correlation_table(&table, CorrelationMethod::Spearman);
        assert_eq!(c.get("pair", "m"), Some(1.0));
        assert!(c.get("solo", "m").is_none());
        assert!(c
            .failures
            .contains_key(&("solo".to_string(), "m".to_string())));
    }
}
