//! Serialised metrics reports.
//!
//! CSV columns, in order: `tag, class, num_gt, precision, recall, f1,
//! ap50, ap50_95`. One row per class, then a row with class `all` holding
//! the aggregate values (its `ap50` and `ap50_95` are mAP@50 and
//! mAP@50:95).

use serde::{Deserialize, Serialize};
use tcleaf_core::metrics::{ClassMetrics, MetricsReport};

pub const CSV_HEADER: &str = "tag,class,num_gt,precision,recall,f1,ap50,ap50_95";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassJson {
    pub class_id: usize,
    pub num_gt: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub tag: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub per_class: Vec<ClassJson>,
}

impl From<&MetricsReport> for ReportJson {
    fn from(r: &MetricsReport) -> Self {
        Self {
            tag: r.tag.clone(),
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            map50: r.map50,
            map50_95: r.map50_95,
            per_class: r
                .per_class
                .iter()
                .map(|c| ClassJson {
                    class_id: c.class_id,
                    num_gt: c.num_gt,
                    precision: c.precision,
                    recall: c.recall,
                    f1: c.f1,
                    ap50: c.ap50,
                    ap50_95: c.ap50_95,
                })
                .collect(),
        }
    }
}

impl From<ReportJson> for MetricsReport {
    fn from(r: ReportJson) -> Self {
        Self {
            tag: r.tag,
            per_class: r
                .per_class
                .into_iter()
                .map(|c| ClassMetrics {
                    class_id: c.class_id,
                    num_gt: c.num_gt,
                    precision: c.precision,
                    recall: c.recall,
                    f1: c.f1,
                    ap50: c.ap50,
                    ap50_95: c.ap50_95,
                })
                .collect(),
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            map50: r.map50,
            map50_95: r.map50_95,
        }
    }
}

pub fn to_json(r: &MetricsReport) -> String {
    serde_json::to_string_pretty(&ReportJson::from(r)).expect("report serialises")
}

pub fn from_json(s: &str) -> serde_json::Result<MetricsReport> {
    serde_json::from_str::<ReportJson>(s).map(Into::into)
}

/// Data rows without the header.
pub fn csv_rows(r: &MetricsReport) -> Vec<String> {
    let mut rows: Vec<String> = r
        .per_class
        .iter()
        .map(|c| format!("{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}", r.tag, c.class_id, c.num_gt, c.precision, c.recall, c.f1, c.ap50, c.ap50_95))
        .collect();
    let gt: usize = r.per_class.iter().map(|c| c.num_gt).sum();
    rows.push(format!("{},all,{},{:.6},{:.6},{:.6},{:.6},{:.6}", r.tag, gt, r.precision, r.recall, r.f1, r.map50, r.map50_95));
    rows
}

pub fn to_csv(reports: &[&MetricsReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        for row in csv_rows(r) {
            s.push_str(&row);
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        MetricsReport {
            tag: "ideal".into(),
            per_class: vec![
                ClassMetrics { class_id: 0, num_gt: 4, precision: 0.5, recall: 0.25, f1: 1.0 / 3.0, ap50: 0.3, ap50_95: 0.1 },
                ClassMetrics { class_id: 1, num_gt: 0, precision: 0.0, recall: 0.0, f1: 0.0, ap50: 0.0, ap50_95: 0.0 },
            ],
            precision: 0.5,
            recall: 0.25,
            f1: 1.0 / 3.0,
            map50: 0.3,
            map50_95: 0.1,
        }
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        assert_eq!(from_json(&to_json(&r)).unwrap(), r);
    }

    #[test]
    fn csv_layout() {
        let csv = to_csv(&[&sample()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "ideal,all,4,0.500000,0.250000,0.333333,0.300000,0.100000");
        assert!(lines.iter().all(|l| l.split(',').count() == 8));
    }
}
