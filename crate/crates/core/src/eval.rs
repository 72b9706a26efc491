//! Segmentation metrics, fold construction and the cross-validation harness.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::crf::{meanfield, CrfParams};
use crate::net::{predict_volume, Network};
use crate::optim::{train, Initial, TrainConfig, TrainingCase};
use crate::seed::{derive_seed, stream, tag};
use crate::volume::check_dims;
use crate::{Error, Label, LabelMap, Mask, Result, Volume};

/// One-vs-rest confusion counts for a single label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn count(pred: &LabelMap, reference: &LabelMap, label: Label, mask: Option<&Mask>) -> Result<Self> {
        check_dims("metrics", pred.dims(), reference.dims())?;
        if let Some(m) = mask {
            check_dims("metrics mask", pred.dims(), m.dims())?;
        }
        let l = label as u8;
        let mut c = Confusion::default();
        for (i, (&p, &r)) in pred.labels().iter().zip(reference.labels()).enumerate() {
            if mask.is_some_and(|m| !m.bits()[i]) {
                continue;
            }
            match (p == l, r == l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    /// 1 when prediction and reference are both empty, 0 when exactly one is.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    /// 0/0 is 1.
    pub fn sensitivity(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fn_)
    }

    /// 0/0 is 1.
    pub fn specificity(&self) -> f64 {
        ratio_or_one(self.tn, self.tn + self.fp)
    }
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn dice(pred: &LabelMap, reference: &LabelMap, label: Label, mask: Option<&Mask>) -> Result<f64> {
    Ok(Confusion::count(pred, reference, label, mask)?.dice())
}

pub fn sensitivity(pred: &LabelMap, reference: &LabelMap, label: Label, mask: Option<&Mask>) -> Result<f64> {
    Ok(Confusion::count(pred, reference, label, mask)?.sensitivity())
}

pub fn specificity(pred: &LabelMap, reference: &LabelMap, label: Label, mask: Option<&Mask>) -> Result<f64> {
    Ok(Confusion::count(pred, reference, label, mask)?.specificity())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan<T> {
    pub folds: Vec<Vec<T>>,
    pub seed: u64,
}

/// Seeded shuffle, then consecutive folds; the first `len % n` folds get one extra id.
pub fn make_folds<T: Clone>(ids: &[T], n: usize, seed: u64) -> Result<FoldPlan<T>> {
    if n == 0 || n > ids.len() {
        return Err(Error::Config(format!("cannot split {} ids into {n} folds", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut stream(seed, &[tag::FOLDS]));
    let (base, extra) = (ids.len() / n, ids.len() % n);
    let mut folds = Vec::with_capacity(n);
    let mut it = order.into_iter();
    for k in 0..n {
        let size = base + usize::from(k < extra);
        folds.push(it.by_ref().take(size).map(|i| ids[i].clone()).collect());
    }
    Ok(FoldPlan { folds, seed })
}

/// A volume with reference labels and the region metrics are computed over.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub id: String,
    pub volume: Volume,
    pub labels: LabelMap,
    pub mask: Mask,
}

/// Anything that can be fitted on a set of cases and then segment another.
pub trait FoldModel {
    fn fit(&mut self, fold: usize, train: &[&EvalCase]) -> Result<()>;
    fn predict(&self, case: &EvalCase) -> Result<LabelMap>;
}

/// Per fold and class; `None` marks a metric undefined for that fold
/// (no reference voxels of the class for dice and sensitivity, no negatives
/// for specificity).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub fold: usize,
    pub class: Label,
    pub dice: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl MetricRow {
    pub fn from_confusion(fold: usize, class: Label, c: &Confusion) -> Self {
        let has_ref = c.tp + c.fn_ > 0;
        let has_neg = c.tn + c.fp > 0;
        MetricRow {
            fold,
            class,
            dice: has_ref.then(|| c.dice()),
            sensitivity: has_ref.then(|| c.sensitivity()),
            specificity: has_neg.then(|| c.specificity()),
        }
    }

    fn values(&self) -> [Option<f64>; 3] {
        [self.dice, self.sensitivity, self.specificity]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stat {
    Avg,
    Std,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub stat: Stat,
    pub class: Label,
    pub dice: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Mean and sample standard deviation (n - 1) of the defined values.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    /// Per class: fold-averaged metrics and their sample standard deviation.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out = Vec::new();
        for stat in [Stat::Avg, Stat::Std] {
            for class in Label::ALL {
                let mut cols = [None; 3];
                for (k, col) in cols.iter_mut().enumerate() {
                    let vals: Vec<f64> = self
                        .rows
                        .iter()
                        .filter(|r| r.class == class)
                        .filter_map(|r| r.values()[k])
                        .collect();
                    let (m, s) = mean_std(&vals);
                    *col = if stat == Stat::Avg { m } else { s };
                }
                out.push(SummaryRow {
                    stat,
                    class,
                    dice: cols[0],
                    sensitivity: cols[1],
                    specificity: cols[2],
                });
            }
        }
        out
    }

    /// Header `fold,class,dice,sensitivity,specificity`, one row per fold and
    /// class, then `avg` and `std` rows. Undefined values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("fold,class,dice,sensitivity,specificity\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.fold,
                r.class.short_name(),
                cell(r.dice),
                cell(r.sensitivity),
                cell(r.specificity)
            );
        }
        for r in self.summary() {
            let stat = if r.stat == Stat::Avg { "avg" } else { "std" };
            let _ = writeln!(
                s,
                "{stat},{},{},{},{}",
                r.class.short_name(),
                cell(r.dice),
                cell(r.sensitivity),
                cell(r.specificity)
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CvOptions {
    /// Restrict metrics to each case's mask.
    pub use_mask: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions { use_mask: true }
    }
}

/// Confusion counts of one prediction against its case, for every class.
pub fn case_confusions(pred: &LabelMap, case: &EvalCase, use_mask: bool) -> Result<[Confusion; 3]> {
    let mask = use_mask.then_some(&case.mask);
    let mut out = [Confusion::default(); 3];
    for (o, l) in out.iter_mut().zip(Label::ALL) {
        *o = Confusion::count(pred, &case.labels, l, mask)?;
    }
    Ok(out)
}

/// Trains on the out-of-fold cases and scores in-fold predictions. Counts are
/// pooled over the cases of a fold, giving one row per fold and class.
pub fn cross_validate<M: FoldModel>(
    cases: &[EvalCase],
    plan: &FoldPlan<String>,
    model: &mut M,
    opts: CvOptions,
) -> Result<MetricsTable> {
    for fold in &plan.folds {
        for id in fold {
            if !cases.iter().any(|c| &c.id == id) {
                return Err(Error::Config(format!("fold plan names unknown case {id}")));
            }
        }
    }
    let mut table = MetricsTable::default();
    for (k, fold) in plan.folds.iter().enumerate() {
        let train: Vec<&EvalCase> = cases.iter().filter(|c| !fold.contains(&c.id)).collect();
        model.fit(k, &train)?;
        let mut pooled = [Confusion::default(); 3];
        for case in cases.iter().filter(|c| fold.contains(&c.id)) {
            let pred = model.predict(case)?;
            for (p, c) in pooled.iter_mut().zip(case_confusions(&pred, case, opts.use_mask)?) {
                p.add(&c);
            }
        }
        for (l, c) in Label::ALL.into_iter().zip(&pooled) {
            table.rows.push(MetricRow::from_confusion(k, l, c));
        }
    }
    Ok(table)
}

/// The network pipeline as a fold model: train (optionally from pretrained
/// weights), predict by tiles, optionally refine with the CRF.
pub struct CnnModel {
    pub train: TrainConfig,
    pub pretrained: Option<Network<f32>>,
    pub crf: Option<CrfParams>,
    net: Option<Network<f32>>,
}

impl CnnModel {
    pub fn new(train: TrainConfig, pretrained: Option<Network<f32>>, crf: Option<CrfParams>) -> Self {
        CnnModel {
            train,
            pretrained,
            crf,
            net: None,
        }
    }

    pub fn network(&self) -> Option<&Network<f32>> {
        self.net.as_ref()
    }
}

impl FoldModel for CnnModel {
    fn fit(&mut self, fold: usize, train_cases: &[&EvalCase]) -> Result<()> {
        let data = train_cases
            .iter()
            .map(|c| TrainingCase::new(c.volume.clone(), c.labels.clone(), c.mask.clone()))
            .collect::<Result<Vec<_>>>()?;
        let cfg = TrainConfig {
            seed: derive_seed(self.train.seed, &[tag::FOLDS, fold as u64]),
            ..self.train.clone()
        };
        let initial = match &self.pretrained {
            Some(net) => Initial::FineTune(net.clone()),
            None => Initial::Fresh,
        };
        self.net = Some(train(&cfg, &data, initial, None, |_| {})?.checkpoint.net);
        Ok(())
    }

    fn predict(&self, case: &EvalCase) -> Result<LabelMap> {
        let net = self
            .net
            .as_ref()
            .ok_or_else(|| Error::Config("model used before fitting".into()))?;
        let mut pm = predict_volume(net, &case.volume, &case.mask)?;
        if let Some(p) = &self.crf {
            pm = meanfield(&pm, &case.volume, p)?;
        }
        Ok(pm.argmax_labels())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Geometry;

    fn lm(labels: &[u8]) -> LabelMap {
        LabelMap::new(Geometry::unit([labels.len(), 1, 1]), labels.to_vec()).unwrap()
    }

    #[test]
    fn dice_hand_cases() {
        let r = lm(&[1, 1, 1, 1, 1, 1, 0, 0, 0, 0]);
        let p = lm(&[1, 1, 1, 0, 0, 0, 1, 0, 0, 0]);
        // |P| = 4, |R| = 6, overlap 3
        assert_eq!(dice(&p, &r, Label::GreyMatter, None).unwrap(), 0.6);
        assert_eq!(dice(&r, &r, Label::GreyMatter, None).unwrap(), 1.0);
        let q = lm(&[0, 0, 0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&q, &r, Label::GreyMatter, None).unwrap(), 0.0);
        assert_eq!(dice(&r, &r, Label::WhiteMatter, None).unwrap(), 1.0);
        assert_eq!(dice(&lm(&[2, 0]), &lm(&[0, 0]), Label::WhiteMatter, None).unwrap(), 0.0);
    }

    #[test]
    fn all_label_prediction() {
        let r = lm(&[1, 1, 0, 0]);
        let p = lm(&[1, 1, 1, 1]);
        assert_eq!(sensitivity(&p, &r, Label::GreyMatter, None).unwrap(), 1.0);
        assert_eq!(specificity(&p, &r, Label::GreyMatter, None).unwrap(), 0.0);
    }

    #[test]
    fn mask_restricts_counts() {
        let r = lm(&[1, 1, 0, 0]);
        let p = lm(&[1, 0, 0, 1]);
        let m = Mask::new([4, 1, 1], vec![true, false, true, false]).unwrap();
        assert_eq!(dice(&p, &r, Label::GreyMatter, Some(&m)).unwrap(), 1.0);
        assert!(dice(&p, &r, Label::GreyMatter, None).unwrap() < 1.0);
    }

    #[test]
    fn folds_of_23() {
        let ids: Vec<String> = (0..23).map(|i| format!("case{i:02}")).collect();
        let plan = make_folds(&ids, 5, 11).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
        let mut all: Vec<String> = plan.folds.concat();
        all.sort();
        assert_eq!(all, ids);
        assert_eq!(plan, make_folds(&ids, 5, 11).unwrap());
        assert!(make_folds(&ids[..3], 5, 0).is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, Some(2.5));
        assert!((s.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.5]), (Some(0.5), None));
        assert_eq!(mean_std(&[]), (None, None));
    }

    #[test]
    fn undefined_metrics_are_none() {
        let c = Confusion {
            tp: 0,
            fp: 3,
            fn_: 0,
            tn: 5,
        };
        let row = MetricRow::from_confusion(0, Label::WhiteMatter, &c);
        assert_eq!(row.dice, None);
        assert_eq!(row.sensitivity, None);
        assert_eq!(row.specificity, Some(5.0 / 8.0));
        let table = MetricsTable { rows: vec![row] };
        assert!(table.to_csv().contains("0,WM,NA,NA,0.625000"));
    }
}
