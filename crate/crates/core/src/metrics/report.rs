use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{auc, gini_normalized, level_curve, recall_at_k, LevelCurve};
use crate::error::{Error, Result};

/// One scored user with ground truth attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredUser {
    pub user_id: u64,
    pub ltv_hat: f64,
    pub p_gw: f64,
    pub p_ptr: f64,
    pub ltv: f64,
    pub s: u8,
    pub g: u8,
}

impl ScoredUser {
    fn check(&self) -> std::result::Result<(), String> {
        if !(self.ltv_hat.is_finite() && self.p_gw.is_finite() && self.p_ptr.is_finite()) {
            return Err("scores must be finite".into());
        }
        if !(self.ltv >= 0.0 && self.ltv.is_finite()) {
            return Err("ltv must be finite and >= 0".into());
        }
        if self.s > 1 || self.g > 1 || (self.s == 1) != (self.ltv > 0.0) || (self.g == 1 && self.s == 0) {
            return Err("inconsistent s/g flags".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub recall_ks: Vec<usize>,
    pub level_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            recall_ks: vec![500, 1000, 2000, 5000],
            level_ks: vec![500, 1000],
        }
    }
}

/// All metrics of one scored population. `None` marks an undefined metric.
///
/// K values larger than the population are evaluated at K = n.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: Option<String>,
    pub n_users: usize,
    pub n_spenders: usize,
    pub n_whales: usize,
    pub auc: Option<f64>,
    pub gini: Option<f64>,
    /// GINI among users with positive spend.
    pub gini_spenders: Option<f64>,
    /// GINI among whales.
    pub gini_whales: Option<f64>,
    pub recall_at: BTreeMap<usize, Option<f64>>,
    pub level_curves: BTreeMap<usize, Option<LevelCurve>>,
}

fn defined<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(what)) => {
            log::warn!("{what}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

pub fn evaluate(users: &[ScoredUser], cfg: &EvalConfig) -> Result<EvalReport> {
    for u in users {
        u.check()
            .map_err(|m| Error::InvalidInput(format!("user {}: {m}", u.user_id)))?;
    }
    let n = users.len();
    let ids: Vec<u64> = users.iter().map(|u| u.user_id).collect();
    let ltv: Vec<f64> = users.iter().map(|u| u.ltv).collect();
    let ltv_hat: Vec<f64> = users.iter().map(|u| u.ltv_hat).collect();
    let p_gw: Vec<f64> = users.iter().map(|u| u.p_gw).collect();
    let p_ptr: Vec<f64> = users.iter().map(|u| u.p_ptr).collect();
    let spender: Vec<bool> = users.iter().map(|u| u.s == 1).collect();
    let whale: Vec<bool> = users.iter().map(|u| u.g == 1).collect();

    let subset_gini = |keep: &[bool]| {
        let (pred, truth): (Vec<f64>, Vec<f64>) = (0..n).filter(|&i| keep[i]).map(|i| (ltv_hat[i], ltv[i])).unzip();
        defined(gini_normalized(&pred, &truth))
    };
    let mut recall_at = BTreeMap::new();
    for &k in &cfg.recall_ks {
        recall_at.insert(k, defined(recall_at_k(&p_gw, &whale, &ids, k.min(n)))?);
    }
    let mut level_curves = BTreeMap::new();
    for &k in &cfg.level_ks {
        level_curves.insert(k, defined(level_curve(&p_gw, &ltv, &whale, &ids, k.min(n)))?);
    }
    Ok(EvalReport {
        label: None,
        n_users: n,
        n_spenders: spender.iter().filter(|&&s| s).count(),
        n_whales: whale.iter().filter(|&&g| g).count(),
        auc: defined(auc(&p_ptr, &spender))?,
        gini: defined(gini_normalized(&ltv_hat, &ltv))?,
        gini_spenders: subset_gini(&spender)?,
        gini_whales: subset_gini(&whale)?,
        recall_at,
        level_curves,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

impl EvalReport {
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied().flatten()
    }

    /// `(key, value)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(label) = &self.label {
            out.push(("variant".to_string(), label.clone()));
        }
        out.push(("n_users".into(), self.n_users.to_string()));
        out.push(("n_spenders".into(), self.n_spenders.to_string()));
        out.push(("n_whales".into(), self.n_whales.to_string()));
        out.push(("auc".into(), fmt_opt(self.auc)));
        out.push(("gini".into(), fmt_opt(self.gini)));
        out.push(("gini_spenders".into(), fmt_opt(self.gini_spenders)));
        out.push(("gini_whales".into(), fmt_opt(self.gini_whales)));
        for (k, v) in &self.recall_at {
            out.push((format!("recall_at_{k}"), fmt_opt(*v)));
        }
        for (k, curve) in &self.level_curves {
            let v = curve.as_ref().map_or_else(
                || "undefined".to_string(),
                |c| c.detected.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
            );
            out.push((format!("level_curve_{k}"), v));
        }
        out
    }

    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// `metric,value` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    /// `k,level,detected,total` rows for plotting.
    pub fn level_curves_csv(&self) -> String {
        let mut s = String::from("k,level,detected,total\n");
        for curve in self.level_curves.values().flatten() {
            for (l, (d, t)) in curve.detected.iter().zip(&curve.totals).enumerate() {
                let _ = writeln!(s, "{},{},{d},{t}", curve.k, l + 1);
            }
        }
        s
    }
}

pub fn write_scores<W: Write>(users: &[ScoredUser], sink: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink);
    for u in users {
        w.serialize(u).map_err(|e| Error::Serde(e.to_string()))?;
    }
    if users.is_empty() {
        w.write_record(["user_id", "ltv_hat", "p_gw", "p_ptr", "ltv", "s", "g"])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))
}

pub fn read_scores<R: Read>(source: R, path: &Path) -> Result<Vec<ScoredUser>> {
    let mut r = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<ScoredUser>().enumerate() {
        let line = i as u64 + 2;
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let u = row.map_err(|e| parse(e.to_string()))?;
        u.check().map_err(parse)?;
        out.push(u);
    }
    Ok(out)
}

/// Opens `path` and reads a score file.
pub fn read_scores_file(path: &Path) -> Result<Vec<ScoredUser>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_scores(f, path)
}
