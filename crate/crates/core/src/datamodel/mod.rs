//! Poses, images, point clouds, runs and regions, plus the sub-map and
//! spacing logic used to turn raw traversals into retrieval samples.

mod cloud;
mod image;
pub mod io;
mod pose;
mod region;
mod run;

pub use cloud::{extract_submap, remove_ground_plane, PointCloud, SubmapOptions};
pub use image::Image;
pub use pose::{is_same_place, normalize_angle, place_distance, Pose, SAME_PLACE_THRESHOLD_M};
pub use region::{filter_by_regions, validate_regions, Region, Split};
pub use run::{subsample_run, Run, Sample};
