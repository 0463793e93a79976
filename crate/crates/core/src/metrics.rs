//! Overall accuracy, IoU and panoptic quality.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{write_json, Error, Result};

/// `counts[target][pred]`; VOID targets are never counted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, target: usize, pred: usize) -> u64 {
        self.counts[target * self.classes + pred]
    }

    pub fn update(&mut self, pred: &[usize], target: &[Option<usize>]) {
        assert_eq!(pred.len(), target.len(), "prediction and target lengths differ");
        for (&p, t) in pred.iter().zip(target) {
            if let Some(t) = *t {
                assert!(p < self.classes && t < self.classes, "class out of range");
                self.counts[t * self.classes + p] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(j, k)).sum()
    }
}

/// Mean IoU over classes with a nonzero denominator, and the per-class IoU
/// (`None` where the class is absent from both target and prediction).
pub fn miou(cm: &ConfusionMatrix) -> Result<(f64, Vec<Option<f64>>)> {
    if cm.total() == 0 {
        return Err(Error::Invalid("mIoU of an empty confusion matrix".into()));
    }
    let per: Vec<Option<f64>> = (0..cm.classes)
        .map(|k| {
            let tp = cm.get(k, k);
            let denom = cm.row_sum(k) + cm.col_sum(k) - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    Ok((present.iter().sum::<f64>() / present.len() as f64, per))
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::Invalid("accuracy of an empty confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / cm.total() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub gt: i32,
    pub pred: i32,
    pub iou: f64,
    pub class_correct: bool,
}

/// Per-class panoptic counts; mergeable across patches.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PanopticTally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PanopticMatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_gt: Vec<i32>,
    pub unmatched_pred: Vec<i32>,
    pub tallies: BTreeMap<usize, PanopticTally>,
}

impl PanopticMatchResult {
    pub fn merge(&mut self, other: &PanopticMatchResult) {
        self.pairs.extend(other.pairs.iter().cloned());
        self.unmatched_gt.extend(&other.unmatched_gt);
        self.unmatched_pred.extend(&other.unmatched_pred);
        for (k, t) in &other.tallies {
            let e = self.tallies.entry(*k).or_default();
            e.tp += t.tp;
            e.fp += t.fp;
            e.fn_ += t.fn_;
            e.iou_sum += t.iou_sum;
        }
    }
}

/// One labelled instance raster: id 0 is background; `classes` gives the
/// class of every nonzero id.
pub struct InstanceMap<'a> {
    pub ids: &'a [i32],
    pub classes: &'a BTreeMap<i32, usize>,
}

fn areas(ids: &[i32], void: &[bool]) -> BTreeMap<i32, u64> {
    let mut out = BTreeMap::new();
    for (&i, &v) in ids.iter().zip(void) {
        if i != 0 && !v {
            *out.entry(i).or_insert(0) += 1;
        }
    }
    out
}

/// Matches instances with mask IoU > 0.5 after removing VOID pixels.
/// A match of the wrong class counts one FN for the true class and one FP
/// for the predicted class.
pub fn panoptic_match(gt: &InstanceMap<'_>, pred: &InstanceMap<'_>, void: &[bool]) -> Result<PanopticMatchResult> {
    if gt.ids.len() != pred.ids.len() || gt.ids.len() != void.len() {
        return Err(Error::Invalid("instance rasters must have the same shape".into()));
    }
    let class_of = |map: &InstanceMap<'_>, id: i32| {
        map.classes
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("instance {id} has no class")))
    };
    let ga = areas(gt.ids, void);
    let pa = areas(pred.ids, void);
    let mut inter: HashMap<(i32, i32), u64> = HashMap::new();
    for ((&g, &p), &v) in gt.ids.iter().zip(pred.ids).zip(void) {
        if g != 0 && p != 0 && !v {
            *inter.entry((g, p)).or_insert(0) += 1;
        }
    }
    let mut keys: Vec<(i32, i32)> = inter.keys().copied().collect();
    keys.sort_unstable();
    let mut result = PanopticMatchResult::default();
    let mut gt_hit = BTreeMap::new();
    let mut pred_hit = BTreeMap::new();
    for (g, p) in keys {
        let i = inter[&(g, p)];
        let union = ga[&g] + pa[&p] - i;
        // IoU > 1/2 in integers
        if 2 * i > union {
            let (gc, pc) = (class_of(gt, g)?, class_of(pred, p)?);
            let iou = i as f64 / union as f64;
            let ok = gc == pc;
            if ok {
                let t = result.tallies.entry(gc).or_default();
                t.tp += 1;
                t.iou_sum += iou;
            } else {
                result.tallies.entry(gc).or_default().fn_ += 1;
                result.tallies.entry(pc).or_default().fp += 1;
            }
            result.pairs.push(MatchedPair {
                gt: g,
                pred: p,
                iou,
                class_correct: ok,
            });
            gt_hit.insert(g, ());
            pred_hit.insert(p, ());
        }
    }
    for &g in ga.keys().filter(|g| !gt_hit.contains_key(g)) {
        result.tallies.entry(class_of(gt, g)?).or_default().fn_ += 1;
        result.unmatched_gt.push(g);
    }
    for &p in pa.keys().filter(|p| !pred_hit.contains_key(p)) {
        result.tallies.entry(class_of(pred, p)?).or_default().fp += 1;
        result.unmatched_pred.push(p);
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticQuality {
    pub sq: f64,
    pub rq: f64,
    pub pq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticReport {
    pub per_class: BTreeMap<usize, PanopticQuality>,
    pub mean: PanopticQuality,
}

/// Per-class and unweighted class-mean SQ, RQ and PQ. Classes without any
/// instance in either raster are absent from the tallies and so excluded.
pub fn pq_sq_rq(result: &PanopticMatchResult) -> Result<PanopticReport> {
    let mut per_class = BTreeMap::new();
    for (&k, t) in &result.tallies {
        let denom = t.tp as f64 + 0.5 * t.fp as f64 + 0.5 * t.fn_ as f64;
        if denom == 0.0 {
            continue;
        }
        let rq = t.tp as f64 / denom;
        let sq = if t.tp == 0 { 0.0 } else { t.iou_sum / t.tp as f64 };
        per_class.insert(k, PanopticQuality { sq, rq, pq: sq * rq });
    }
    if per_class.is_empty() {
        return Err(Error::Invalid("no instances to score".into()));
    }
    let n = per_class.len() as f64;
    let mean = PanopticQuality {
        sq: per_class.values().map(|q| q.sq).sum::<f64>() / n,
        rq: per_class.values().map(|q| q.rq).sum::<f64>() / n,
        pq: per_class.values().map(|q| q.pq).sum::<f64>() / n,
    };
    Ok(PanopticReport { per_class, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall_accuracy: f64,
    pub miou: f64,
    pub class_names: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub support: Vec<u64>,
    pub confusion: ConfusionMatrix,
}

impl MetricReport {
    pub fn from_confusion(cm: ConfusionMatrix, class_names: &[String]) -> Result<Self> {
        let (m, per) = miou(&cm)?;
        let names = (0..cm.classes)
            .map(|k| class_names.get(k).cloned().unwrap_or_else(|| format!("class_{k}")))
            .collect();
        Ok(Self {
            overall_accuracy: overall_accuracy(&cm)?,
            miou: m,
            class_names: names,
            per_class_iou: per,
            support: (0..cm.classes).map(|k| cm.row_sum(k)).collect(),
            confusion: cm,
        })
    }

    /// One row per class, then an `all` row with OA and mIoU.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,name,support,iou,accuracy\n");
        for k in 0..self.confusion.classes {
            let iou = self.per_class_iou[k].map_or_else(String::new, |v| format!("{v:.6}"));
            out.push_str(&format!("{k},{},{},{iou},\n", self.class_names[k], self.support[k]));
        }
        out.push_str(&format!(
            "all,all,{},{:.6},{:.6}\n",
            self.confusion.total(),
            self.miou,
            self.overall_accuracy
        ));
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        crate::error::create_dir_all(dir)?;
        write_json(&dir.join(format!("{stem}.json")), self)?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}
