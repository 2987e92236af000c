//! Spinning multi-channel lidar model.

use super::world::{WorldError, WorldModel};
use crate::geometry::{Pose3, Vec3};
use crate::pointcloud::PointCloud;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub channels: usize,
    pub lowest_elevation_deg: f64,
    pub elevation_step_deg: f64,
    pub azimuth_steps: usize,
    pub range_sigma: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            lowest_elevation_deg: -15.0,
            elevation_step_deg: 2.0,
            azimuth_steps: 900,
            range_sigma: 0.02,
            min_range: 0.3,
            max_range: 100.0,
        }
    }
}

impl LidarConfig {
    pub fn max_points(&self) -> usize {
        self.channels * self.azimuth_steps
    }

    /// Unit ray directions in the sensor frame, channel-major.
    pub fn directions(&self) -> Vec<Vec3> {
        let mut dirs = Vec::with_capacity(self.max_points());
        for ch in 0..self.channels {
            let el = (self.lowest_elevation_deg + self.elevation_step_deg * ch as f64).to_radians();
            for k in 0..self.azimuth_steps {
                let az = std::f64::consts::TAU * k as f64 / self.azimuth_steps as f64;
                dirs.push(Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
            }
        }
        dirs
    }
}

/// Mixes a world seed with stream coordinates into an independent seed.
pub fn stream_seed(seed: u64, robot: u16, index: u64, stream: u64) -> u64 {
    let mut z = seed ^ ((robot as u64) << 48) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Ray-casts one sweep from `pose` and returns points in the sensor frame.
/// `noise_seed = None` gives exact ranges.
pub fn simulate_scan(world: &WorldModel, lidar: &LidarConfig, pose: &Pose3, noise_seed: Option<u64>) -> Result<PointCloud, WorldError> {
    world.check_pose(&pose.translation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed.unwrap_or(0));
    let normal = Normal::new(0.0, lidar.range_sigma.max(0.0)).expect("finite sigma");
    let rot = pose.rotation.matrix();
    let mut points = Vec::with_capacity(lidar.max_points());
    for d in lidar.directions() {
        let Some(r) = world.cast(&pose.translation, &(rot * d), lidar.max_range) else {
            continue;
        };
        if r < lidar.min_range {
            continue;
        }
        let r = match noise_seed {
            Some(_) if lidar.range_sigma > 0.0 => r + normal.sample(&mut rng),
            _ => r,
        };
        points.push(d * r);
    }
    Ok(PointCloud::new(points))
}
