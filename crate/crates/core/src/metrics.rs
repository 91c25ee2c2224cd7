//! Confusion-matrix based segmentation metrics.

use std::fmt::Write;

use crate::error::{Error, Result};

/// `counts[g * C + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Row-major `C x C` counts, rows indexed by ground truth.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.classes..(c + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn accumulate(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, truth {}",
                pred.len(),
                truth.len()
            )));
        }
        if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= self.classes) {
            return Err(Error::Data(format!(
                "class index {bad} >= {}",
                self.classes
            )));
        }
        for (&p, &g) in pred.iter().zip(truth) {
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(
                "cannot merge matrices of different size".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouDice {
    pub iou: Vec<f64>,
    pub dice: Vec<f64>,
    /// Classes absent from both truth and prediction; they hold 0 in the
    /// per-class vectors and are left out of the means.
    pub absent: Vec<bool>,
    pub mean_iou: f64,
    pub mean_dice: f64,
}

pub fn iou_dice(cm: &ConfusionMatrix) -> Result<IouDice> {
    if cm.total() == 0 {
        return Err(Error::Numeric(
            "IoU/Dice undefined on an empty confusion matrix".into(),
        ));
    }
    let c = cm.classes();
    let mut out = IouDice {
        iou: vec![0.0; c],
        dice: vec![0.0; c],
        absent: vec![false; c],
        mean_iou: 0.0,
        mean_dice: 0.0,
    };
    let mut present = 0usize;
    for k in 0..c {
        let inter = cm.get(k, k) as f64;
        let both = (cm.row_sum(k) + cm.col_sum(k)) as f64;
        let union = both - inter;
        if union == 0.0 {
            out.absent[k] = true;
            continue;
        }
        out.iou[k] = inter / union;
        out.dice[k] = 2.0 * inter / both;
        out.mean_iou += out.iou[k];
        out.mean_dice += out.dice[k];
        present += 1;
    }
    out.mean_iou /= present as f64;
    out.mean_dice /= present as f64;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agreement {
    pub oa: f64,
    pub expected: f64,
    pub kappa: f64,
    /// Set when chance agreement is 1 and kappa was reported as 1 by convention.
    pub kappa_degenerate: bool,
    /// Precision per class.
    pub users: Vec<f64>,
    /// Recall per class.
    pub producers: Vec<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn oa_kappa(cm: &ConfusionMatrix) -> Result<Agreement> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Numeric(
            "overall accuracy undefined on an empty confusion matrix".into(),
        ));
    }
    let c = cm.classes();
    let n = total as f64;
    let oa = cm.trace() as f64 / n;
    let expected = (0..c)
        .map(|k| cm.row_sum(k) as f64 * cm.col_sum(k) as f64)
        .sum::<f64>()
        / (n * n);
    let degenerate = expected == 1.0;
    let kappa = if degenerate {
        1.0
    } else {
        (oa - expected) / (1.0 - expected)
    };
    Ok(Agreement {
        oa,
        expected,
        kappa,
        kappa_degenerate: degenerate,
        users: (0..c).map(|k| ratio(cm.get(k, k), cm.col_sum(k))).collect(),
        producers: (0..c).map(|k| ratio(cm.get(k, k), cm.row_sum(k))).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub class_names: Vec<String>,
    pub class_keys: Vec<String>,
    pub iou_dice: IouDice,
    pub agreement: Agreement,
}

impl Report {
    pub fn from_matrix(
        cm: &ConfusionMatrix,
        class_names: Vec<String>,
        class_keys: Vec<String>,
    ) -> Result<Self> {
        if class_names.len() != cm.classes() || class_keys.len() != cm.classes() {
            return Err(Error::Shape(
                "class name count does not match the matrix".into(),
            ));
        }
        Ok(Self {
            class_names,
            class_keys,
            iou_dice: iou_dice(cm)?,
            agreement: oa_kappa(cm)?,
        })
    }

    /// One `metric.class=value` line per value.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let (m, a) = (&self.iou_dice, &self.agreement);
        for (k, key) in self.class_keys.iter().enumerate() {
            let _ = writeln!(s, "iou.{key}={}", m.iou[k]);
            let _ = writeln!(s, "dice.{key}={}", m.dice[k]);
            let _ = writeln!(s, "users.{key}={}", a.users[k]);
            let _ = writeln!(s, "producers.{key}={}", a.producers[k]);
            let _ = writeln!(s, "absent.{key}={}", u8::from(m.absent[k]));
        }
        let _ = writeln!(s, "iou.class_mean={}", m.mean_iou);
        let _ = writeln!(s, "dice.class_mean={}", m.mean_dice);
        let _ = writeln!(s, "oa={}", a.oa);
        let _ = writeln!(s, "kappa={}", a.kappa);
        let _ = writeln!(s, "kappa.degenerate={}", u8::from(a.kappa_degenerate));
        s
    }

    pub fn table(&self) -> String {
        let (m, a) = (&self.iou_dice, &self.agreement);
        let width = self
            .class_names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>7}  {:>7}  {:>14}  {:>18}",
            "Class", "IoU", "Dice", "User's Acc (%)", "Producer's Acc (%)"
        );
        for (k, name) in self.class_names.iter().enumerate() {
            let mark = if m.absent[k] { " (absent)" } else { "" };
            let _ = writeln!(
                s,
                "{name:<width$}  {:>7.4}  {:>7.4}  {:>14.2}  {:>18.2}{mark}",
                m.iou[k],
                m.dice[k],
                100.0 * a.users[k],
                100.0 * a.producers[k]
            );
        }
        let _ = writeln!(
            s,
            "class-mean IoU {:.4}  class-mean Dice {:.4} (absent classes excluded)",
            m.mean_iou, m.mean_dice
        );
        let flag = if a.kappa_degenerate {
            " (chance agreement is 1; reported as 1)"
        } else {
            ""
        };
        let _ = writeln!(
            s,
            "Overall Accuracy (OA) {:.2}%  Kappa {:.2}%{flag}",
            100.0 * a.oa,
            100.0 * a.kappa
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_rejects_out_of_range() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(cm.accumulate(&[2], &[0]), Err(Error::Data(_))));
        assert!(matches!(cm.accumulate(&[0, 1], &[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn empty_matrix_is_undefined() {
        let cm = ConfusionMatrix::new(3);
        assert!(iou_dice(&cm).is_err());
        assert!(oa_kappa(&cm).is_err());
    }
}
