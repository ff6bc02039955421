//! Fold aggregation. TSV layout (version 1): a `#` header line, a column
//! line `fold wa ua wf1 n_test`, one row per fold, then `mean` and `std`
//! rows, then a `#` footer line.

use crate::probe::metrics::MetricsReport;

pub const REPORT_VERSION: u32 = 1;
pub const REPORT_HEADER: &str = "# metrics v1; mean and population std over folds";
pub const REPORT_FOOTER: &str = "# UA averages recall over classes present in each fold's test set";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub wa: f64,
    pub ua: f64,
    pub wf1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub folds: Vec<(MetricRow, usize)>,
    pub mean: MetricRow,
    pub std: MetricRow,
    /// Fold indices whose test set missed at least one class.
    pub folds_with_absent: Vec<usize>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Returns `None` for an empty report list.
pub fn evaluate_report(reports: &[MetricsReport]) -> Option<ReportTable> {
    if reports.is_empty() {
        return None;
    }
    let col = |f: fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let (wa, wa_s) = col(|r| r.wa);
    let (ua, ua_s) = col(|r| r.ua);
    let (wf1, wf1_s) = col(|r| r.wf1);
    Some(ReportTable {
        folds: reports
            .iter()
            .map(|r| {
                (
                    MetricRow {
                        wa: r.wa,
                        ua: r.ua,
                        wf1: r.wf1,
                    },
                    r.n_test,
                )
            })
            .collect(),
        mean: MetricRow { wa, ua, wf1 },
        std: MetricRow {
            wa: wa_s,
            ua: ua_s,
            wf1: wf1_s,
        },
        folds_with_absent: reports
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.absent_classes.is_empty())
            .map(|(i, _)| i)
            .collect(),
    })
}

impl ReportTable {
    fn footer(&self) -> String {
        if self.folds_with_absent.is_empty() {
            REPORT_FOOTER.to_string()
        } else {
            let list: Vec<String> = self.folds_with_absent.iter().map(usize::to_string).collect();
            format!("{REPORT_FOOTER}; folds with absent classes: {}", list.join(","))
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\nfold\twa\tua\twf1\tn_test\n");
        for (i, (r, n)) in self.folds.iter().enumerate() {
            s += &format!("{i}\t{:.4}\t{:.4}\t{:.4}\t{n}\n", r.wa, r.ua, r.wf1);
        }
        let total: usize = self.folds.iter().map(|f| f.1).sum();
        s += &format!("mean\t{:.4}\t{:.4}\t{:.4}\t{total}\n", self.mean.wa, self.mean.ua, self.mean.wf1);
        s += &format!("std\t{:.4}\t{:.4}\t{:.4}\t-\n", self.std.wa, self.std.ua, self.std.wf1);
        s + &self.footer() + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n{:<6} {:>8} {:>8} {:>8} {:>7}\n", "fold", "WA", "UA", "WF1", "n_test");
        for (i, (r, n)) in self.folds.iter().enumerate() {
            s += &format!("{i:<6} {:>8.2} {:>8.2} {:>8.2} {n:>7}\n", r.wa, r.ua, r.wf1);
        }
        s += &format!("{:<6} {:>8.2} {:>8.2} {:>8.2}\n", "mean", self.mean.wa, self.mean.ua, self.mean.wf1);
        s += &format!("{:<6} {:>8.2} {:>8.2} {:>8.2}\n", "std", self.std.wa, self.std.ua, self.std.wf1);
        s + &self.footer() + "\n"
    }
}
