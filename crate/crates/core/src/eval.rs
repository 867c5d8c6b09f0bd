//! FAR / FRR / EER and campaign summaries.

use std::fmt::Write as _;

use crate::attack::{AttackSetting, CampaignTable, ScoreRow};
use crate::error::{Error, Result};
use crate::trials::Label;

/// Error rates at one threshold; a rate is `None` when its class is absent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub far: Option<f64>,
    pub frr: Option<f64>,
}

/// Accept when `score >= threshold`.
pub fn compute_rates(scores: &[(f64, Label)], threshold: f64) -> Result<Rates> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores".into()));
    }
    let (mut n_t, mut n_n, mut false_rej, mut false_acc) = (0usize, 0usize, 0usize, 0usize);
    for &(s, l) in scores {
        match l {
            Label::Target => {
                n_t += 1;
                if s < threshold {
                    false_rej += 1;
                }
            }
            Label::Nontarget => {
                n_n += 1;
                if s >= threshold {
                    false_acc += 1;
                }
            }
        }
    }
    Ok(Rates {
        far: (n_n > 0).then(|| false_acc as f64 / n_n as f64),
        frr: (n_t > 0).then(|| false_rej as f64 / n_t as f64),
    })
}

/// Candidate thresholds: one below every score, the midpoints between
/// consecutive distinct scores, one above every score.
fn thresholds(sorted: &[f64]) -> Vec<f64> {
    let mut distinct: Vec<f64> = sorted.to_vec();
    distinct.dedup();
    let mut out = Vec::with_capacity(distinct.len() + 1);
    out.push(distinct[0] - 1.0);
    for w in distinct.windows(2) {
        out.push(0.5 * (w[0] + w[1]));
    }
    out.push(distinct[distinct.len() - 1] + 1.0);
    out
}

/// `(EER, threshold)` where FAR and FRR cross, linearly interpolated between
/// the two bracketing thresholds.
pub fn compute_eer(scores: &[(f64, Label)]) -> Result<(f64, f64)> {
    let n_t = scores.iter().filter(|s| s.1 == Label::Target).count();
    let n_n = scores.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::Metric("EER needs both target and nontarget scores".into()));
    }
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::Metric("scores must be finite".into()));
    }
    let mut sorted: Vec<(f64, Label)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let values: Vec<f64> = sorted.iter().map(|s| s.0).collect();
    let ts = thresholds(&values);

    // sweep upward: scores below t are rejected
    let mut idx = 0;
    let (mut rej_t, mut rej_n) = (0usize, 0usize);
    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &ts {
        while idx < sorted.len() && sorted[idx].0 < t {
            match sorted[idx].1 {
                Label::Target => rej_t += 1,
                Label::Nontarget => rej_n += 1,
            }
            idx += 1;
        }
        let far = (n_n - rej_n) as f64 / n_n as f64;
        let frr = rej_t as f64 / n_t as f64;
        if frr - far >= 0.0 {
            let (pt, pfar, pfrr) = prev.expect("lowest threshold has FAR 1 and FRR 0");
            let d0 = pfrr - pfar;
            let d1 = frr - far;
            let alpha = -d0 / (d1 - d0);
            return Ok((pfar + alpha * (far - pfar), pt + alpha * (t - pt)));
        }
        prev = Some((t, far, frr));
    }
    unreachable!("highest threshold has FRR 1 and FAR 0")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub setting: AttackSetting,
    pub epsilon: f64,
    pub eer: f64,
    /// At the threshold fixed by the ε = 0 EER operating point.
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignSummary {
    pub setting: AttackSetting,
    pub source: String,
    pub target: String,
    pub feature_std: f64,
    pub threshold: f64,
    pub rows: Vec<SummaryRow>,
}

impl CampaignSummary {
    pub fn baseline(&self) -> &SummaryRow {
        self.rows.iter().find(|r| r.epsilon == 0.0).expect("baseline row")
    }

    /// Row with the highest FAR (earliest ε on ties).
    pub fn best(&self) -> &SummaryRow {
        self.rows
            .iter()
            .fold(&self.rows[0], |best, r| if r.far > best.far { r } else { best })
    }
}

pub fn summarize_campaign(table: &CampaignTable) -> Result<CampaignSummary> {
    if !table.epsilons.contains(&0.0) {
        return Err(Error::Report("campaign has no epsilon = 0 baseline column".into()));
    }
    let column = |eps: f64| -> Vec<(f64, Label)> {
        table.rows.iter().filter(|r| r.epsilon == eps).map(|r| (r.adv_score, r.label)).collect()
    };
    let (_, threshold) = compute_eer(&column(0.0))?;
    let rows = table
        .epsilons
        .iter()
        .map(|&eps| {
            let scores = column(eps);
            let (eer, _) = compute_eer(&scores)?;
            let rates = compute_rates(&scores, threshold)?;
            Ok(SummaryRow {
                setting: table.setting,
                epsilon: eps,
                eer,
                far: rates.far.unwrap_or(f64::NAN),
                frr: rates.frr.unwrap_or(f64::NAN),
            })
        })
        .collect::<Result<_>>()?;
    Ok(CampaignSummary {
        setting: table.setting,
        source: table.source.clone(),
        target: table.target.clone(),
        feature_std: table.feature_std,
        threshold,
        rows,
    })
}

/// Aligned text table, percentages for the rates.
pub fn format_summary_text(summaries: &[CampaignSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:<22} {:>8} {:>10} {:>9} {:>9} {:>9}",
        "setting", "systems", "epsilon", "eps/std", "EER%", "FAR%", "FRR%"
    );
    for s in summaries {
        let systems = format!("{}->{}", s.source, s.target);
        for r in &s.rows {
            let rel = if s.feature_std > 0.0 { r.epsilon / s.feature_std } else { f64::NAN };
            let _ = writeln!(
                out,
                "{:<20} {:<22} {:>8.3} {:>10.4} {:>9.2} {:>9.2} {:>9.2}",
                r.setting.name(),
                systems,
                r.epsilon,
                rel,
                100.0 * r.eer,
                100.0 * r.far,
                100.0 * r.frr
            );
        }
    }
    out
}

pub fn format_summary_csv(summaries: &[CampaignSummary]) -> String {
    let mut out = String::from("setting,source,target,epsilon,feature_std,eer,far,frr,threshold\n");
    for s in summaries {
        for r in &s.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.10},{:.10},{:.10},{:.10},{:.10}",
                r.setting.name(),
                s.source,
                s.target,
                r.epsilon,
                s.feature_std,
                r.eer,
                r.far,
                r.frr,
                s.threshold
            );
        }
    }
    out
}

/// Header lines `# key value`, then `trial enroll test label epsilon clean adv`
/// per cell. Floats use the shortest exact representation, so
/// [`parse_score_table`] recovers the table bit for bit.
pub fn format_score_table(table: &CampaignTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# setting {}", table.setting.name());
    let _ = writeln!(out, "# source {}", table.source);
    let _ = writeln!(out, "# target {}", table.target);
    let _ = writeln!(out, "# feature_std {:e}", table.feature_std);
    let eps: Vec<String> = table.epsilons.iter().map(|e| format!("{e:e}")).collect();
    let _ = writeln!(out, "# epsilons {}", eps.join(","));
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{} {} {} {} {:e} {:e} {:e}",
            r.trial, r.enroll, r.test, r.label, r.epsilon, r.clean_score, r.adv_score
        );
    }
    out
}

pub fn parse_score_table(text: &str) -> Result<CampaignTable> {
    let bad = |line: usize, what: &str| Error::Report(format!("score table line {line}: {what}"));
    let mut meta = std::collections::BTreeMap::new();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if let Some(rest) = line.strip_prefix('#') {
            // `# key = value` lines are an echoed config, not table metadata.
            if let Some((k, v)) = rest.trim().split_once(' ').filter(|(_, v)| !v.trim_start().starts_with('=')) {
                meta.insert(k.to_string(), v.trim().to_string());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let [trial, enroll, test, label, eps, clean, adv] = f[..] else {
            return Err(bad(n, "expected 7 fields"));
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n, &format!("bad number {s:?}")));
        rows.push(ScoreRow {
            trial: trial.parse().map_err(|_| bad(n, "bad trial index"))?,
            enroll: enroll.to_string(),
            test: test.to_string(),
            label: label.parse().map_err(|_| bad(n, "bad label"))?,
            epsilon: num(eps)?,
            clean_score: num(clean)?,
            adv_score: num(adv)?,
        });
    }
    let get = |k: &str| meta.get(k).ok_or_else(|| Error::Report(format!("score table has no `# {k}` header")));
    let setting: AttackSetting = get("setting")?.parse()?;
    let feature_std = get("feature_std")?
        .parse()
        .map_err(|_| Error::Report("bad feature_std header".into()))?;
    let epsilons = get("epsilons")?
        .split(',')
        .map(|e| e.parse::<f64>().map_err(|_| Error::Report(format!("bad epsilon {e:?}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(CampaignTable {
        setting,
        source: get("source")?.clone(),
        target: get("target")?.clone(),
        epsilons,
        feature_std,
        rows,
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::*;

    /// Every candidate threshold evaluated by direct counting.
    pub fn brute_force_eer(scores: &[(f64, Label)]) -> (f64, f64) {
        let mut values: Vec<f64> = scores.iter().map(|s| s.0).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let mut cands = vec![values[0] - 1.0];
        for i in 1..values.len() {
            cands.push((values[i - 1] + values[i]) / 2.0);
        }
        cands.push(values[values.len() - 1] + 1.0);
        let rates: Vec<(f64, f64)> = cands
            .iter()
            .map(|&t| {
                let r = compute_rates(scores, t).unwrap();
                (r.far.unwrap(), r.frr.unwrap())
            })
            .collect();
        for k in 1..cands.len() {
            let (far0, frr0) = rates[k - 1];
            let (far1, frr1) = rates[k];
            if frr1 - far1 >= 0.0 && frr0 - far0 < 0.0 {
                let a = (far0 - frr0) / ((frr1 - far1) - (frr0 - far0));
                return (far0 + a * (far1 - far0), cands[k - 1] + a * (cands[k] - cands[k - 1]));
            }
        }
        panic!("no crossing")
    }
}
