//! Percentage of correct keypoints, normalized by head or torso length.

use std::fmt;
use std::str::FromStr;

use crate::data::{KeypointAnnotation, SYNTH_JOINT_NAMES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Head,
    Torso,
}

impl Norm {
    pub fn length(self, anno: &KeypointAnnotation) -> Option<f64> {
        match self {
            Norm::Head => anno.norm_head,
            Norm::Torso => anno.norm_torso,
        }
    }
}

/// A named metric: `pckh0.5` or `pck0.2` (any threshold is accepted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric {
    pub norm: Norm,
    pub threshold: f64,
}

impl Metric {
    pub const PCKH_05: Metric = Metric {
        norm: Norm::Head,
        threshold: 0.5,
    };
    pub const PCK_02: Metric = Metric {
        norm: Norm::Torso,
        threshold: 0.2,
    };

    pub fn name(&self) -> &'static str {
        match self.norm {
            Norm::Head => "pckh",
            Norm::Torso => "pck",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (norm, rest) = if let Some(r) = s.strip_prefix("pckh") {
            (Norm::Head, r)
        } else if let Some(r) = s.strip_prefix("pck") {
            (Norm::Torso, r)
        } else {
            return Err(Error::Config(format!("unknown metric '{s}'")));
        };
        let threshold: f64 = rest
            .trim_start_matches('@')
            .parse()
            .map_err(|_| Error::Config(format!("bad metric threshold in '{s}'")))?;
        if threshold.is_nan() || threshold <= 0.0 {
            return Err(Error::Config(format!("metric threshold must be > 0 in '{s}'")));
        }
        Ok(Metric { norm, threshold })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.name(), self.threshold)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckResult {
    /// Fraction correct per joint; `None` when no sample had that joint visible.
    pub per_joint: Vec<Option<f64>>,
    /// Visible (evaluated) count per joint.
    pub counts: Vec<usize>,
    /// Mean of the evaluated per-joint fractions.
    pub mean: f64,
    pub threshold: f64,
    pub norm: Norm,
    /// Samples dropped for lacking a positive normalization length.
    pub excluded: usize,
}

/// Fraction of visible joints with `distance / norm_length <= threshold`, per joint.
pub fn pck(preds: &[Vec<[f64; 2]>], annos: &[KeypointAnnotation], threshold: f64, norm: Norm) -> Result<PckResult> {
    if preds.len() != annos.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} annotations",
            preds.len(),
            annos.len()
        )));
    }
    let joints = annos.first().map_or(0, |a| a.num_joints());
    let mut hits = vec![0usize; joints];
    let mut counts = vec![0usize; joints];
    let mut excluded = 0;
    for (p, a) in preds.iter().zip(annos) {
        if a.num_joints() != joints || p.len() != joints {
            return Err(Error::Invalid(format!(
                "sample '{}' has {} joints and {} predictions, expected {joints}",
                a.image_id,
                a.num_joints(),
                p.len()
            )));
        }
        let len = match norm.length(a) {
            Some(l) if l > 0.0 => l,
            _ => {
                excluded += 1;
                continue;
            }
        };
        for j in 0..joints {
            if !a.visible[j] {
                continue;
            }
            counts[j] += 1;
            let d = ((p[j][0] - a.joints[j][0]).powi(2) + (p[j][1] - a.joints[j][1]).powi(2)).sqrt();
            if d / len <= threshold {
                hits[j] += 1;
            }
        }
    }
    let per_joint: Vec<Option<f64>> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
        .collect();
    let evaluated: Vec<f64> = per_joint.iter().flatten().copied().collect();
    let mean = if evaluated.is_empty() {
        0.0
    } else {
        evaluated.iter().sum::<f64>() / evaluated.len() as f64
    };
    Ok(PckResult {
        per_joint,
        counts,
        mean,
        threshold,
        norm,
        excluded,
    })
}

pub fn evaluate(preds: &[Vec<[f64; 2]>], annos: &[KeypointAnnotation], metric: Metric) -> Result<PckResult> {
    pck(preds, annos, metric.threshold, metric.norm)
}

/// Column headers of the published result tables.
pub const TABLE_COLUMNS: [&str; 8] = ["Head", "Shoulder", "Elbow", "Wrist", "Hip", "Knee", "Ankle", "Mean"];

pub const MPII_JOINT_NAMES: [&str; 16] = [
    "r_ankle",
    "r_knee",
    "r_hip",
    "l_hip",
    "l_knee",
    "l_ankle",
    "pelvis",
    "thorax",
    "upper_neck",
    "head_top",
    "r_wrist",
    "r_elbow",
    "r_shoulder",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
];

pub const LSP_JOINT_NAMES: [&str; 14] = [
    "r_ankle",
    "r_knee",
    "r_hip",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_wrist",
    "r_elbow",
    "r_shoulder",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "neck",
    "head_top",
];

/// Which joint indices make up each table column for a dataset layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointLayout {
    /// 16-joint MPII order.
    Mpii,
    /// 14-joint LSP order.
    Lsp,
    /// The procedural skeleton order.
    Synthetic,
}

impl JointLayout {
    /// Joint indices for the first seven columns.
    pub fn groups(self) -> [&'static [usize]; 7] {
        match self {
            JointLayout::Mpii => [&[8, 9], &[12, 13], &[11, 14], &[10, 15], &[2, 3], &[1, 4], &[0, 5]],
            JointLayout::Lsp => [&[12, 13], &[8, 9], &[7, 10], &[6, 11], &[2, 3], &[1, 4], &[0, 5]],
            JointLayout::Synthetic => [&[0, 1], &[6, 7], &[4, 5], &[2, 3], &[12, 13], &[10, 11], &[8, 9]],
        }
    }

    /// Name of every joint index, falling back to `joint<k>` past the layout.
    pub fn names(self, joints: usize) -> Vec<String> {
        let table: &[&str] = match self {
            JointLayout::Mpii => &MPII_JOINT_NAMES,
            JointLayout::Lsp => &LSP_JOINT_NAMES,
            JointLayout::Synthetic => &SYNTH_JOINT_NAMES,
        };
        (0..joints)
            .map(|j| table.get(j).map_or_else(|| format!("joint{j}"), |s| s.to_string()))
            .collect()
    }

    /// Layout of an annotation file with `joints` entries per record.
    pub fn for_joints(joints: usize) -> Self {
        match joints {
            16 => JointLayout::Mpii,
            14 => JointLayout::Lsp,
            _ => JointLayout::Synthetic,
        }
    }
}

/// One value per table column in percent; `None` when no joint of the group was evaluated.
///
/// A group's value pools hits over its joints; `Mean` pools every joint that
/// belongs to some group.
pub fn table_row(r: &PckResult, layout: JointLayout) -> [Option<f64>; 8] {
    let mut row = [None; 8];
    let (mut all_hits, mut all_count) = (0.0, 0usize);
    for (col, group) in layout.groups().iter().enumerate() {
        let (mut hits, mut count) = (0.0, 0usize);
        for &j in group.iter().filter(|&&j| j < r.per_joint.len()) {
            if let Some(f) = r.per_joint[j] {
                hits += f * r.counts[j] as f64;
                count += r.counts[j];
            }
        }
        if count > 0 {
            row[col] = Some(100.0 * hits / count as f64);
            all_hits += hits;
            all_count += count;
        }
    }
    if all_count > 0 {
        row[7] = Some(100.0 * all_hits / all_count as f64);
    }
    row
}

/// Text table in the published column order.
pub fn format_table(r: &PckResult, layout: JointLayout, label: &str) -> String {
    let mut s = format!("{:<10}", "");
    for c in TABLE_COLUMNS {
        s.push_str(&format!("{c:>9}"));
    }
    s.push('\n');
    s.push_str(&format!("{label:<10}"));
    for v in table_row(r, layout) {
        match v {
            Some(v) => s.push_str(&format!("{v:>9.1}")),
            None => s.push_str(&format!("{:>9}", "-")),
        }
    }
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anno(joints: Vec<[f64; 2]>, norm: f64) -> KeypointAnnotation {
        let n = joints.len();
        KeypointAnnotation {
            image_id: "x".into(),
            joints,
            visible: vec![true; n],
            norm_head: Some(norm),
            norm_torso: Some(norm),
            center: [0.0, 0.0],
            scale: 1.0,
        }
    }

    #[test]
    fn metric_names_parse() {
        assert_eq!("pckh0.5".parse::<Metric>().unwrap(), Metric::PCKH_05);
        assert_eq!("pck@0.2".parse::<Metric>().unwrap(), Metric::PCK_02);
        assert_eq!(Metric::PCK_02.to_string(), "pck0.2");
        assert!("oks".parse::<Metric>().is_err());
    }

    #[test]
    fn zero_norm_is_excluded() {
        let a = vec![anno(vec![[0.0, 0.0]], 0.0), anno(vec![[0.0, 0.0]], 1.0)];
        let r = pck(&[vec![[5.0, 0.0]], vec![[0.0, 0.0]]], &a, 0.5, Norm::Head).unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.per_joint, vec![Some(1.0)]);
    }

    #[test]
    fn table_columns_follow_published_order() {
        let a = anno(vec![[1.0, 1.0]; 16], 1.0);
        let r = pck(
            std::slice::from_ref(&a.joints),
            std::slice::from_ref(&a),
            0.5,
            Norm::Head,
        )
        .unwrap();
        let t = format_table(&r, JointLayout::Mpii, "gt");
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, TABLE_COLUMNS);
        assert!(table_row(&r, JointLayout::Mpii).iter().all(|v| *v == Some(100.0)));
    }
}
