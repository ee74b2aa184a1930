//! Dense point tracks obtained by integrating per-frame flow fields.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::ser::{SerializeSeq, SerializeStruct};
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::flowio::{FlowField, Interpolation, MaskImage};
use crate::geometry::Pixel;

/// Number of points sampled from an object mask.
pub const DEFAULT_NUM_SEEDS: usize = 500;

/// Tracking collapses when fewer than this fraction of seeds survive.
pub const DEFAULT_REPLAN_RATIO: f64 = 0.10;

pub const TRACKSET_SCHEMA: &str = "flowrig.trackset/1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("mask has no members")]
    EmptyMask,
    #[error("flow {index} is {found:?}, expected {expected:?}")]
    DimensionMismatch {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("requested zero seeds")]
    ZeroSeeds,
}

/// Draws `n` pixels uniformly from the mask members.
///
/// Without replacement when the mask has at least `n` members, with
/// replacement otherwise. The result depends only on `(mask, n, seed)`.
pub fn seed_tracks(mask: &MaskImage, n: usize, seed: u64) -> Result<Vec<Pixel>, TrackingError> {
    if n == 0 {
        return Err(TrackingError::ZeroSeeds);
    }
    let members = mask.members();
    if members.is_empty() {
        return Err(TrackingError::EmptyMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if members.len() >= n {
        Ok(index::sample(&mut rng, members.len(), n).into_iter().map(|i| members[i]).collect())
    } else {
        Ok((0..n).map(|_| members[rng.random_range(0..members.len())]).collect())
    }
}

/// Per-point pixel trajectories with monotone liveness.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    /// `positions[t][i]` is track `i` at frame `t`; meaningful only while alive.
    positions: Vec<Vec<Pixel>>,
    /// First frame at which each track is dead.
    death: Vec<Option<usize>>,
}

impl TrackSet {
    pub fn num_tracks(&self) -> usize {
        self.death.len()
    }

    /// Number of frames, including frame 0.
    pub fn frames(&self) -> usize {
        self.positions.len()
    }

    pub fn origins(&self) -> &[Pixel] {
        &self.positions[0]
    }

    pub fn is_alive(&self, track: usize, frame: usize) -> bool {
        match self.death[track] {
            Some(d) => frame < d,
            None => true,
        }
    }

    pub fn death_frame(&self, track: usize) -> Option<usize> {
        self.death[track]
    }

    pub fn position(&self, track: usize, frame: usize) -> Option<Pixel> {
        self.is_alive(track, frame).then(|| self.positions[frame][track])
    }

    pub fn alive_count(&self, frame: usize) -> usize {
        (0..self.num_tracks()).filter(|&i| self.is_alive(i, frame)).count()
    }

    pub fn alive_indices(&self, frame: usize) -> Vec<usize> {
        (0..self.num_tracks()).filter(|&i| self.is_alive(i, frame)).collect()
    }
}

/// Serialized as `{"schema", "frames", "tracks": [[[u, v] | null, ...], ...]}`
/// with one inner array per track and `null` from its death frame on.
impl Serialize for TrackSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        struct Track<'a>(&'a TrackSet, usize);
        impl Serialize for Track<'_> {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                let mut seq = serializer.serialize_seq(Some(self.0.frames()))?;
                for t in 0..self.0.frames() {
                    seq.serialize_element(&self.0.position(self.1, t).map(|p| [p.u, p.v]))?;
                }
                seq.end()
            }
        }
        struct Tracks<'a>(&'a TrackSet);
        impl Serialize for Tracks<'_> {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                let mut seq = serializer.serialize_seq(Some(self.0.num_tracks()))?;
                for i in 0..self.0.num_tracks() {
                    seq.serialize_element(&Track(self.0, i))?;
                }
                seq.end()
            }
        }
        let mut s = serializer.serialize_struct("TrackSet", 3)?;
        s.serialize_field("schema", TRACKSET_SCHEMA)?;
        s.serialize_field("frames", &self.frames())?;
        s.serialize_field("tracks", &Tracks(self))?;
        s.end()
    }
}

/// Integrates `flows` from the seed pixels.
///
/// A track dies permanently at the first frame where it leaves the image
/// or lands on an unknown flow cell.
pub fn chain_tracks(seeds: &[Pixel], flows: &[FlowField], interp: Interpolation) -> Result<TrackSet, TrackingError> {
    if let Some(first) = flows.first() {
        for (index, f) in flows.iter().enumerate() {
            if f.dims() != first.dims() {
                return Err(TrackingError::DimensionMismatch { index, expected: first.dims(), found: f.dims() });
            }
        }
    }
    let mut death: Vec<Option<usize>> = match flows.first() {
        Some(f) => seeds.iter().map(|p| (!f.contains(p)).then_some(0)).collect(),
        None => vec![None; seeds.len()],
    };
    let mut positions = Vec::with_capacity(flows.len() + 1);
    positions.push(seeds.to_vec());
    for (t, flow) in flows.iter().enumerate() {
        let current = &positions[t];
        let mut next = current.clone();
        for (i, p) in current.iter().enumerate() {
            if death[i].is_some() {
                continue;
            }
            let moved = match flow.sample_known(p, interp) {
                Ok(Some((du, dv))) => Some(Pixel::new(p.u + du, p.v + dv)),
                _ => None,
            };
            match moved {
                Some(q) if flow.contains(&q) => next[i] = q,
                Some(q) => {
                    next[i] = q;
                    death[i] = Some(t + 1);
                }
                None => death[i] = Some(t + 1),
            }
        }
        positions.push(next);
    }
    Ok(TrackSet { positions, death })
}

/// Fraction of the originally sampled tracks still alive at `frame`.
pub fn inlier_ratio(tracks: &TrackSet, frame: usize, initial_count: usize) -> f64 {
    tracks.alive_count(frame) as f64 / initial_count.max(1) as f64
}

/// True iff `ratio < threshold` (strict).
pub fn needs_replan(ratio: f64, threshold: f64) -> bool {
    ratio < threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn single_pixel_mask_repeats() {
        let mut mask = MaskImage::empty(10, 10);
        mask.set(3, 4, true);
        let seeds = seed_tracks(&mask, 500, 1).unwrap();
        assert_eq!(seeds.len(), 500);
        assert!(seeds.iter().all(|p| *p == Pixel::new(3.0, 4.0)));
    }

    #[test]
    fn large_mask_samples_distinct_members() {
        let mask = MaskImage::from_fn(50, 40, |x, y| x < 25 && y < 40);
        assert_eq!(mask.count(), 1000);
        let a = seed_tracks(&mask, 500, 42).unwrap();
        let b = seed_tracks(&mask, 500, 42).unwrap();
        assert_eq!(a, b);
        let distinct: HashSet<(i64, i64)> = a.iter().map(|p| (p.u as i64, p.v as i64)).collect();
        assert_eq!(distinct.len(), 500);
        assert!(a.iter().all(|p| mask.get(p.u as usize, p.v as usize)));
        assert_ne!(a, seed_tracks(&mask, 500, 43).unwrap());
    }

    #[test]
    fn empty_mask_fails() {
        assert_eq!(seed_tracks(&MaskImage::empty(4, 4), 10, 0), Err(TrackingError::EmptyMask));
    }

    #[test]
    fn zero_flow_keeps_tracks_still() {
        let seeds = vec![Pixel::new(1.0, 2.0), Pixel::new(3.5, 0.0)];
        let flows = vec![FlowField::zeros(8, 6); 4];
        let ts = chain_tracks(&seeds, &flows, Interpolation::Bilinear).unwrap();
        assert_eq!(ts.frames(), 5);
        for t in 0..5 {
            assert_eq!(ts.alive_count(t), 2);
            assert_eq!(ts.position(0, t), Some(seeds[0]));
            assert_eq!(ts.position(1, t), Some(seeds[1]));
        }
    }

    #[test]
    fn constant_flow_accumulates() {
        let flows = vec![FlowField::from_fn(32, 32, |_, _| (1.0, 0.0)); 5];
        let ts = chain_tracks(&[Pixel::new(10.0, 10.0)], &flows, Interpolation::Bilinear).unwrap();
        assert_eq!(ts.position(0, 5), Some(Pixel::new(15.0, 10.0)));
    }

    #[test]
    fn leaving_the_frame_kills() {
        let flows = vec![FlowField::from_fn(16, 8, |_, _| (2.0, 0.0)); 3];
        let ts = chain_tracks(&[Pixel::new(15.0, 3.0), Pixel::new(0.0, 3.0)], &flows, Interpolation::Bilinear).unwrap();
        assert!(ts.is_alive(0, 0));
        assert!(!ts.is_alive(0, 1));
        assert!(!ts.is_alive(0, 3));
        assert_eq!(ts.death_frame(0), Some(1));
        assert_eq!(ts.position(0, 2), None);
        assert!(ts.is_alive(1, 3));
    }

    #[test]
    fn mismatched_flows_rejected() {
        let flows = vec![FlowField::zeros(4, 4), FlowField::zeros(4, 5)];
        assert!(matches!(
            chain_tracks(&[Pixel::new(0.0, 0.0)], &flows, Interpolation::Bilinear),
            Err(TrackingError::DimensionMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn replan_boundary() {
        let flows = vec![FlowField::zeros(4, 4)];
        let ts = chain_tracks(&vec![Pixel::new(1.0, 1.0); 500], &flows, Interpolation::Bilinear).unwrap();
        let r = inlier_ratio(&ts, 1, 500);
        assert_eq!(r, 1.0);
        assert!(!needs_replan(r, DEFAULT_REPLAN_RATIO));
        assert!(needs_replan(49.0 / 500.0, DEFAULT_REPLAN_RATIO));
        assert!(!needs_replan(50.0 / 500.0, DEFAULT_REPLAN_RATIO));
    }

    #[test]
    fn json_schema_shape() {
        let flows = vec![FlowField::from_fn(4, 4, |_, _| (2.0, 0.0))];
        let ts = chain_tracks(&[Pixel::new(0.0, 1.0), Pixel::new(3.0, 1.0)], &flows, Interpolation::Bilinear).unwrap();
        let v = serde_json::to_value(&ts).unwrap();
        assert_eq!(v["schema"], TRACKSET_SCHEMA);
        assert_eq!(v["frames"], 2);
        assert_eq!(v["tracks"][0], serde_json::json!([[0.0, 1.0], [2.0, 1.0]]));
        assert_eq!(v["tracks"][1], serde_json::json!([[3.0, 1.0], null]));
    }
}
