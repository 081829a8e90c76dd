//! Grading metrics: confusion matrix, quadratic κ, MSE, balanced and
//! overall accuracy, and the ROC curve for KL ≥ 2.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;

/// Index of the largest probability, ties going to the lowest grade.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn check_grades(truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::invalid(format!("{} true grades vs {} predictions", truth.len(), pred.len())));
    }
    if truth.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    if let Some(&g) = truth.iter().chain(pred).find(|&&g| g >= NUM_CLASSES) {
        return Err(Error::invalid(format!("grade {g} outside 0..={}", NUM_CLASSES - 1)));
    }
    Ok(())
}

/// Rows are true grades, columns predicted grades.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_grades(truth: &[usize], pred: &[usize]) -> Result<Self> {
        check_grades(truth, pred)?;
        let mut counts = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for (&t, &p) in truth.iter().zip(pred) {
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kappa {
    pub value: f64,
    /// Expected disagreement was zero (both raters constant and equal).
    pub degenerate: bool,
}

pub fn kappa_from_confusion(cm: &ConfusionMatrix) -> Kappa {
    let n = cm.total() as f64;
    let denom_w = ((NUM_CLASSES - 1) * (NUM_CLASSES - 1)) as f64;
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..NUM_CLASSES {
        for j in 0..NUM_CLASSES {
            let w = ((i as f64 - j as f64).powi(2)) / denom_w;
            observed += w * cm.counts[i][j] as f64;
            expected += w * cm.row_sum(i) as f64 * cm.col_sum(j) as f64 / n;
        }
    }
    if expected == 0.0 {
        Kappa { value: 1.0, degenerate: true }
    } else {
        Kappa { value: 1.0 - observed / expected, degenerate: false }
    }
}

pub fn quadratic_kappa(truth: &[usize], pred: &[usize]) -> Result<Kappa> {
    Ok(kappa_from_confusion(&ConfusionMatrix::from_grades(truth, pred)?))
}

pub fn classification_mse(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_grades(truth, pred)?;
    let sq: f64 = truth.iter().zip(pred).map(|(&t, &p)| (t as f64 - p as f64).powi(2)).sum();
    Ok(sq / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancedAccuracy {
    pub value: f64,
    /// Classes with no true samples, left out of the mean.
    pub excluded: Vec<usize>,
}

pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<BalancedAccuracy> {
    let mut recalls = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..NUM_CLASSES {
        let row = cm.row_sum(i);
        if row == 0 {
            excluded.push(i);
        } else {
            recalls.push(cm.counts[i][i] as f64 / row as f64);
        }
    }
    if recalls.is_empty() {
        return Err(Error::Empty("confusion matrix has no samples".into()));
    }
    Ok(BalancedAccuracy { value: recalls.iter().sum::<f64>() / recalls.len() as f64, excluded })
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Empty("confusion matrix has no samples".into()));
    }
    Ok(cm.trace() as f64 / n as f64)
}

/// Probability of radiographic OA, `p2 + p3 + p4`.
pub fn oa_score(p: &[f64]) -> f64 {
    p[2..].iter().sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// (false-positive rate, true-positive rate) from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC over binary labels and scores, one point per distinct threshold.
pub fn roc_curve(positive: &[bool], scores: &[f64]) -> Result<RocCurve> {
    if positive.len() != scores.len() {
        return Err(Error::invalid("labels and scores differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite ROC score"));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!("ROC needs both classes, got {pos} positive and {neg} negative")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    Ok(RocCurve { points, auc })
}

/// ROC for KL ≥ 2 with score `p2 + p3 + p4`.
pub fn roc_auc(truth: &[usize], probs: &[Vec<f64>]) -> Result<RocCurve> {
    if truth.len() != probs.len() {
        return Err(Error::invalid("grades and probability vectors differ in length"));
    }
    let positive: Vec<bool> = truth.iter().map(|&g| g >= 2).collect();
    let scores: Vec<f64> = probs.iter().map(|p| oa_score(p)).collect();
    roc_curve(&positive, &scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub grade: usize,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub kappa: Kappa,
    pub mse: f64,
    pub balanced_accuracy: BalancedAccuracy,
    pub overall_accuracy: f64,
    /// `None` when the set lacks either OA-positive or OA-negative samples.
    pub roc: Option<RocCurve>,
}

impl EvalReport {
    pub fn from_predictions(preds: &[Prediction]) -> Result<Self> {
        for p in preds {
            if p.probs.len() != NUM_CLASSES {
                return Err(Error::invalid(format!("sample `{}` has {} probabilities", p.id, p.probs.len())));
            }
        }
        let truth: Vec<usize> = preds.iter().map(|p| p.grade).collect();
        let pred: Vec<usize> = preds.iter().map(Prediction::predicted).collect();
        let confusion = ConfusionMatrix::from_grades(&truth, &pred)?;
        let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
        Ok(EvalReport {
            kappa: kappa_from_confusion(&confusion),
            mse: classification_mse(&truth, &pred)?,
            balanced_accuracy: balanced_accuracy(&confusion)?,
            overall_accuracy: overall_accuracy(&confusion)?,
            roc: roc_auc(&truth, &probs).ok(),
            confusion,
        })
    }

    /// Headline metrics in report order; AUC is `None` when undefined.
    pub fn headline(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("balanced_accuracy", Some(self.balanced_accuracy.value)),
            ("overall_accuracy", Some(self.overall_accuracy)),
            ("quadratic_kappa", Some(self.kappa.value)),
            ("mse", Some(self.mse)),
            ("auc_kl_ge_2", self.roc.as_ref().map(|r| r.auc)),
        ]
    }

    /// Human-readable summary, values to 4 decimal places.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "samples\t{}", self.confusion.total()).unwrap();
        for (key, v) in self.headline() {
            match v {
                Some(v) => writeln!(s, "{key}\t{v:.4}").unwrap(),
                None => writeln!(s, "{key}\tundefined (single-class OA labels)").unwrap(),
            }
        }
        if self.kappa.degenerate {
            writeln!(s, "note\tkappa expected disagreement is zero; reported as 1").unwrap();
        }
        if !self.balanced_accuracy.excluded.is_empty() {
            writeln!(s, "note\tgrades {:?} have no samples and are excluded from balanced accuracy", self.balanced_accuracy.excluded)
                .unwrap();
        }
        writeln!(s, "note\tpredicted grade is the argmax probability, ties to the lower grade").unwrap();
        s
    }

    /// Same metrics at full precision, one `key\tvalue` per line.
    pub fn metrics_tsv(&self) -> String {
        let mut s = format!("samples\t{}\n", self.confusion.total());
        for (key, v) in self.headline() {
            match v {
                Some(v) => writeln!(s, "{key}\t{v}").unwrap(),
                None => writeln!(s, "{key}\tNaN").unwrap(),
            }
        }
        s
    }

    pub fn confusion_tsv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 0..NUM_CLASSES {
            write!(s, "\t{j}").unwrap();
        }
        s.push('\n');
        for i in 0..NUM_CLASSES {
            write!(s, "{i}").unwrap();
            for j in 0..NUM_CLASSES {
                write!(s, "\t{}", self.confusion.counts[i][j]).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn roc_tsv(curve: &RocCurve) -> String {
    let mut s = String::from("fpr\ttpr\n");
    for (x, y) in &curve.points {
        writeln!(s, "{x}\t{y}").unwrap();
    }
    s
}

pub fn parse_roc_tsv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::invalid(format!("ROC line {}: `{line}`", i + 1));
        let (a, b) = line.split_once('\t').ok_or_else(bad)?;
        pts.push((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?));
    }
    Ok(pts)
}

/// Writes `summary.txt`, `metrics.tsv`, `confusion.tsv` and (when defined) `roc.tsv`.
pub fn render_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.txt"), report.summary())?;
    fs::write(dir.join("metrics.tsv"), report.metrics_tsv())?;
    fs::write(dir.join("confusion.tsv"), report.confusion_tsv())?;
    if let Some(roc) = &report.roc {
        fs::write(dir.join("roc.tsv"), roc_tsv(roc))?;
    }
    Ok(())
}

pub fn render_predictions(preds: &[Prediction]) -> String {
    let mut s = String::from("# id\ttrue_grade\tp0\tp1\tp2\tp3\tp4\n");
    for p in preds {
        write!(s, "{}\t{}", p.id, p.grade).unwrap();
        for v in &p.probs {
            write!(s, "\t{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let err = |m: &str| Error::invalid(format!("prediction line {}: {m}", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 2 + NUM_CLASSES {
            return Err(err(&format!("expected {} fields, found {}", 2 + NUM_CLASSES, f.len())));
        }
        let grade: usize = f[1].parse().map_err(|_| err("bad grade"))?;
        if grade >= NUM_CLASSES {
            return Err(err("grade out of range"));
        }
        let probs = f[2..].iter().map(|v| v.parse::<f64>().map_err(|_| err("bad probability"))).collect::<Result<_>>()?;
        out.push(Prediction { id: f[0].to_string(), grade, probs });
    }
    Ok(out)
}

pub fn write_predictions(preds: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, render_predictions(preds))?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    parse_predictions(&fs::read_to_string(path)?)
}
