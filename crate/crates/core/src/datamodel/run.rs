use std::sync::Arc;

use super::cloud::PointCloud;
use super::image::Image;
use super::pose::{place_distance, Pose};
use crate::error::{Error, Result};

/// One acquisition: a pose with the image and sub-map captured there.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: u64,
    pub run_id: String,
    pub pose: Pose,
    pub image: Option<Arc<Image>>,
    pub submap: Option<Arc<PointCloud>>,
    /// Ground-truth place identity, when the data source knows it.
    pub place_label: Option<u32>,
}

impl Sample {
    pub fn image(&self) -> Result<&Image> {
        self.image
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("sample {} has no image", self.sample_id)))
    }

    pub fn submap(&self) -> Result<&PointCloud> {
        self.submap
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("sample {} has no sub-map", self.sample_id)))
    }
}

/// One traversal, samples ordered by timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    pub run_id: String,
    pub condition: String,
    pub samples: Vec<Sample>,
}

impl Run {
    pub fn new(
        run_id: impl Into<String>,
        condition: impl Into<String>,
        mut samples: Vec<Sample>,
    ) -> Self {
        samples.sort_by_key(|s| (s.pose.timestamp, s.sample_id));
        Self {
            run_id: run_id.into(),
            condition: condition.into(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Greedy spacing filter: keeps the first sample, then every sample at
/// least `spacing` meters (planar) from the last kept one.
pub fn subsample_run(run: &Run, spacing: f64) -> Result<Run> {
    if !(spacing > 0.0) {
        return Err(Error::invalid(format!(
            "spacing must be positive, got {spacing}"
        )));
    }
    let Some(first) = run.samples.first() else {
        return Err(Error::Empty("run"));
    };
    let mut kept = vec![first.clone()];
    for s in &run.samples[1..] {
        let last = &kept.last().expect("non-empty").pose;
        if place_distance(last, &s.pose) >= spacing {
            kept.push(s.clone());
        }
    }
    Ok(Run {
        run_id: run.run_id.clone(),
        condition: run.condition.clone(),
        samples: kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn line_run(xs: &[f64]) -> Run {
        let samples = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| Sample {
                sample_id: i as u64,
                run_id: "r".into(),
                pose: Pose {
                    x,
                    timestamp: i as u64 * 1000,
                    ..Pose::default()
                },
                image: None,
                submap: None,
                place_label: None,
            })
            .collect();
        Run::new("r", "overcast", samples)
    }

    fn xs(run: &Run) -> Vec<f64> {
        run.samples.iter().map(|s| s.pose.x).collect()
    }

    #[test]
    fn greedy_hand_trace() {
        let r = line_run(&[0., 2., 4., 6., 8., 10.]);
        assert_eq!(xs(&subsample_run(&r, 5.0).unwrap()), vec![0.0, 6.0]);
    }

    #[test]
    fn tiny_spacing_keeps_all_and_single_sample_kept() {
        let r = line_run(&[0., 1., 2.5, 3.0]);
        assert_eq!(subsample_run(&r, 0.001).unwrap().len(), 4);
        assert_eq!(
            xs(&subsample_run(&line_run(&[7.0]), 5.0).unwrap()),
            vec![7.0]
        );
    }

    #[test]
    fn errors() {
        assert!(subsample_run(&line_run(&[]), 5.0).is_err());
        assert!(subsample_run(&line_run(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn kept_pairs_respect_spacing() {
        let pts: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).powf(1.3)).collect();
        let out = subsample_run(&line_run(&pts), 5.0).unwrap();
        for w in out.samples.windows(2) {
            assert!(place_distance(&w[0].pose, &w[1].pose) >= 5.0);
        }
    }

    #[test]
    fn missing_media_is_reported() {
        let r = line_run(&[0.0]);
        assert!(r.samples[0].image().is_err());
        assert!(r.samples[0].submap().is_err());
    }
}
