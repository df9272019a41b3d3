use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::run::{Run, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// Closed axis-aligned rectangle of the map frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub region_id: String,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub split: Split,
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.x_min <= other.x_max
            && other.x_min <= self.x_max
            && self.y_min <= other.y_max
            && other.y_min <= self.y_max
    }
}

/// Checks that regions of the same split are pairwise disjoint.
pub fn validate_regions(regions: &[Region]) -> Result<()> {
    for (i, a) in regions.iter().enumerate() {
        if a.x_min > a.x_max || a.y_min > a.y_max {
            return Err(Error::invalid(format!(
                "region {} has inverted bounds",
                a.region_id
            )));
        }
        for b in &regions[i + 1..] {
            if a.split == b.split && a.overlaps(b) {
                return Err(Error::invalid(format!(
                    "{} regions {} and {} overlap",
                    a.split, a.region_id, b.region_id
                )));
            }
        }
    }
    Ok(())
}

/// Samples of `run` whose planar position lies in a region tagged `split`.
pub fn filter_by_regions(run: &Run, regions: &[Region], split: Split) -> Result<Vec<Sample>> {
    if regions.is_empty() {
        return Err(Error::Empty("region list"));
    }
    Ok(run
        .samples
        .iter()
        .filter(|s| {
            regions
                .iter()
                .any(|r| r.split == split && r.contains(s.pose.x, s.pose.y))
        })
        .cloned()
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Pose;

    fn run_at(points: &[(f64, f64)]) -> Run {
        let samples = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Sample {
                sample_id: i as u64,
                run_id: "r".into(),
                pose: Pose {
                    x,
                    y,
                    timestamp: i as u64,
                    ..Pose::default()
                },
                image: None,
                submap: None,
                place_label: None,
            })
            .collect();
        Run::new("r", "", samples)
    }

    fn rect(id: &str, x0: f64, x1: f64, y0: f64, y1: f64, split: Split) -> Region {
        Region {
            region_id: id.into(),
            x_min: x0,
            x_max: x1,
            y_min: y0,
            y_max: y1,
            split,
        }
    }

    #[test]
    fn inside_and_boundary_included() {
        let run = run_at(&[(5.0, 5.0), (10.0, 3.0), (10.5, 3.0)]);
        let regions = [rect("v", 0., 10., 0., 10., Split::Validation)];
        let got = filter_by_regions(&run, &regions, Split::Validation).unwrap();
        let ids: Vec<u64> = got.iter().map(|s| s.sample_id).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn missing_split_gives_empty() {
        let run = run_at(&[(5.0, 5.0)]);
        let regions = [rect("t", 0., 10., 0., 10., Split::Train)];
        assert!(filter_by_regions(&run, &regions, Split::Validation)
            .unwrap()
            .is_empty());
        assert!(filter_by_regions(&run, &[], Split::Train).is_err());
    }

    #[test]
    fn disjoint_splits_give_disjoint_samples() {
        let pts: Vec<(f64, f64)> = (0..100).map(|i| (i as f64, (i % 7) as f64)).collect();
        let run = run_at(&pts);
        let regions = [
            rect("t1", 0., 39., -1., 10., Split::Train),
            rect("t2", 60., 99., -1., 10., Split::Train),
            rect("v", 40., 59., -1., 10., Split::Validation),
        ];
        validate_regions(&regions).unwrap();
        let tr = filter_by_regions(&run, &regions, Split::Train).unwrap();
        let va = filter_by_regions(&run, &regions, Split::Validation).unwrap();
        assert!(tr
            .iter()
            .all(|a| va.iter().all(|b| a.sample_id != b.sample_id)));
        assert_eq!(tr.len() + va.len(), 100);
    }

    #[test]
    fn overlapping_same_split_rejected() {
        let regions = [
            rect("a", 0., 10., 0., 10., Split::Train),
            rect("b", 5., 15., 5., 15., Split::Train),
        ];
        assert!(validate_regions(&regions).is_err());
    }
}
