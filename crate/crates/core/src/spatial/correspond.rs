use crate::domain::{Frame, Pose};
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};

use super::SpatialIndex;

/// One matched pair between the current frame and an earlier one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub current: usize,
    pub previous: usize,
    pub distance: f64,
}

/// Pairs `(current, previous)`; each previous point appears at most once and
/// every distance is strictly below the threshold it was built with.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Transform taking sensor coordinates of the earlier frame into the sensor
/// coordinates of the current one: `pose_current⁻¹ · pose_previous`.
pub fn relative_transform(pose_current: &Pose, pose_previous: &Pose) -> Pose {
    pose_current.inverse().compose(pose_previous)
}

pub fn match_correspondences(
    current: &Frame,
    previous: &Frame,
    tau: f64,
) -> Result<CorrespondenceSet> {
    let index = SpatialIndex::build(&current.points)?;
    match_against_index(&index, &current.pose, previous, tau, ExecMode::default())
}

/// Like [`match_correspondences`] with a prebuilt index over the current frame.
pub fn match_against_index(
    current_index: &SpatialIndex,
    current_pose: &Pose,
    previous: &Frame,
    tau: f64,
    mode: ExecMode,
) -> Result<CorrespondenceSet> {
    if !(tau > 0.0) {
        return Err(Error::ConfigInvalid(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let rel = relative_transform(current_pose, &previous.pose);
    let hits = par::map_indexed(previous.points.len(), mode, |j| {
        let p = rel.apply(&previous.points[j]);
        let nn = current_index.knn(&p, 1).expect("index is non-empty");
        let nn = nn[0];
        (nn.distance < tau).then_some(Correspondence {
            current: nn.index,
            previous: j,
            distance: nn.distance,
        })
    });
    Ok(CorrespondenceSet {
        pairs: hits.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Point;

    fn cloud() -> Vec<Point> {
        (0..200)
            .map(|i| {
                let t = i as f64;
                [t * 0.37 % 7.0, (t * 0.61) % 5.0, (t * 0.13) % 2.0]
            })
            .collect()
    }

    #[test]
    fn identical_frames_self_pair() {
        let f = Frame::new(0, cloud(), Pose::identity());
        let set = match_correspondences(&f, &f, 0.1).unwrap();
        assert_eq!(set.len(), 200);
        for c in &set.pairs {
            assert_eq!(c.current, c.previous);
            assert_eq!(c.distance, 0.0);
        }
    }

    #[test]
    fn ego_motion_is_inverted() {
        let world = cloud();
        let pose_prev = Pose::from_yaw_translation(0.0, [0.0, 0.0, 1.7]);
        let pose_cur = Pose::from_yaw_translation(0.0, [0.5, 0.0, 1.7]);
        let prev_pts = world.iter().map(|p| pose_prev.inverse().apply(p)).collect();
        let cur_pts = world.iter().map(|p| pose_cur.inverse().apply(p)).collect();
        let prev = Frame::new(0, prev_pts, pose_prev);
        let cur = Frame::new(1, cur_pts, pose_cur);
        let set = match_correspondences(&cur, &prev, 0.05).unwrap();
        assert_eq!(set.len(), 200);
        for c in &set.pairs {
            assert_eq!(c.current, c.previous);
            assert!(c.distance < 1e-12);
        }
    }

    #[test]
    fn far_apart_is_empty() {
        let a = Frame::new(0, cloud(), Pose::identity());
        let b = Frame::new(
            1,
            cloud(),
            Pose::from_yaw_translation(0.0, [100.0, 0.0, 0.0]),
        );
        assert!(match_correspondences(&a, &b, 0.2).unwrap().is_empty());
    }

    #[test]
    fn threshold_is_strict() {
        let a = Frame::new(0, vec![[0.0, 0.0, 0.0]], Pose::identity());
        let b = Frame::new(1, vec![[0.25, 0.0, 0.0]], Pose::identity());
        assert!(match_correspondences(&a, &b, 0.25).unwrap().is_empty());
        assert_eq!(match_correspondences(&a, &b, 0.2501).unwrap().len(), 1);
        assert!(match_correspondences(&a, &b, 0.0).is_err());
    }
}
