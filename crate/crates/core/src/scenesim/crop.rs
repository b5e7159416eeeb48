use serde::{Deserialize, Serialize};

use super::render::Snapshot;
use crate::error::{Error, Result};
use crate::geometry::{BBox2D, CameraIntrinsics};

/// Number of crop channels: r, g, b, depth, target mask.
pub const CROP_CHANNELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    pub out_height: usize,
    pub out_width: usize,
    /// Window growth on each side, as a fraction of the box extent.
    pub margin: f64,
    /// Widen the shorter window side to the output aspect ratio before
    /// clamping to the image.
    pub keep_aspect: bool,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            out_height: 48,
            out_width: 64,
            margin: 0.15,
            keep_aspect: true,
        }
    }
}

/// Crop window in continuous pixel coordinates of the source image,
/// measured at pixel edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub u0: f64,
    pub u1: f64,
    pub v0: f64,
    pub v1: f64,
}

/// A resampled RGBD-M patch and the intrinsics of the virtual camera that
/// would have produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    /// Channel-major `5 x out_height x out_width`.
    pub data: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// Adapted intrinsics. The principal point may fall outside the crop.
    pub intrinsics: CameraIntrinsics,
    pub window: CropWindow,
    pub scale_u: f64,
    pub scale_v: f64,
}

impl Crop {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Maps a source-image pixel coordinate to crop coordinates.
    pub fn map_point(&self, u: f64, v: f64) -> [f64; 2] {
        [
            (u - self.window.u0) * self.scale_u - 0.5,
            (v - self.window.v0) * self.scale_v - 0.5,
        ]
    }
}

fn window_for(bbox: &BBox2D, snap: &Snapshot, cfg: &CropConfig) -> Result<CropWindow> {
    let (w, h) = (snap.width() as f64, snap.height() as f64);
    let (mut bw, mut bh) = (bbox.w * (1.0 + 2.0 * cfg.margin), bbox.h * (1.0 + 2.0 * cfg.margin));
    bw = bw.max(1.0);
    bh = bh.max(1.0);
    if cfg.keep_aspect {
        let aspect = cfg.out_width as f64 / cfg.out_height as f64;
        if bw / bh < aspect {
            bw = bh * aspect;
        } else {
            bh = bw / aspect;
        }
    }
    let win = CropWindow {
        u0: (bbox.u_mid - bw / 2.0).max(-0.5),
        u1: (bbox.u_mid + bw / 2.0).min(w - 0.5),
        v0: (bbox.v_mid - bh / 2.0).max(-0.5),
        v1: (bbox.v_mid + bh / 2.0).min(h - 0.5),
    };
    if !(win.u1 > win.u0 && win.v1 > win.v0) {
        return Err(Error::Crop);
    }
    Ok(win)
}

/// Crops `snap` around `bbox` for `instance_id` and resamples to the
/// configured size by nearest neighbour.
pub fn crop(snap: &Snapshot, bbox: &BBox2D, instance_id: u32, cfg: &CropConfig) -> Result<Crop> {
    if cfg.out_height == 0 || cfg.out_width == 0 {
        return Err(Error::config("crop.out_height", "crop size must be non-zero"));
    }
    if !(cfg.margin >= 0.0) {
        return Err(Error::config("crop.margin", "must be >= 0"));
    }
    let win = window_for(bbox, snap, cfg)?;
    crop_window(snap, win, instance_id, cfg.out_height, cfg.out_width)
}

/// Crops an explicit window.
pub fn crop_window(snap: &Snapshot, win: CropWindow, instance_id: u32, out_h: usize, out_w: usize) -> Result<Crop> {
    let (w, h) = (snap.width(), snap.height());
    if !(win.u1 > win.u0 && win.v1 > win.v0) || win.u1 <= -0.5 || win.v1 <= -0.5 || win.u0 >= w as f64 - 0.5 || win.v0 >= h as f64 - 0.5 {
        return Err(Error::Crop);
    }
    let su = out_w as f64 / (win.u1 - win.u0);
    let sv = out_h as f64 / (win.v1 - win.v0);
    let n = out_h * out_w;
    let mut data = vec![0.0f32; CROP_CHANNELS * n];
    for i in 0..out_h {
        let v = win.v0 + (i as f64 + 0.5) / sv;
        let si = (v.round().max(0.0) as usize).min(h - 1);
        for j in 0..out_w {
            let u = win.u0 + (j as f64 + 0.5) / su;
            let sj = (u.round().max(0.0) as usize).min(w - 1);
            let src = si * w + sj;
            let dst = i * out_w + j;
            for c in 0..3 {
                data[c * n + dst] = snap.color[src * 3 + c];
            }
            data[3 * n + dst] = snap.depth[src];
            data[4 * n + dst] = if snap.mask[src] == instance_id { 1.0 } else { 0.0 };
        }
    }
    let k = &snap.intrinsics;
    let u_left = win.u0 + 0.5 / su;
    let v_top = win.v0 + 0.5 / sv;
    let intrinsics = CameraIntrinsics {
        fx: k.fx * su,
        fy: k.fy * sv,
        cx: (k.cx - u_left) * su,
        cy: (k.cy - v_top) * sv,
        width: out_w as u32,
        height: out_h as u32,
    };
    Ok(Crop {
        data,
        height: out_h,
        width: out_w,
        intrinsics,
        window: win,
        scale_u: su,
        scale_v: sv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::scenesim::episode::{generate_episode, EpisodeConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snapshot() -> Snapshot {
        let cfg = EpisodeConfig {
            gt_points: 16,
            ..EpisodeConfig::default()
        };
        generate_episode(5, &cfg).unwrap().snapshots.remove(0)
    }

    #[test]
    fn full_image_crop_keeps_intrinsics() {
        let snap = snapshot();
        let (w, h) = (snap.width(), snap.height());
        let win = CropWindow {
            u0: -0.5,
            u1: w as f64 - 0.5,
            v0: -0.5,
            v1: h as f64 - 0.5,
        };
        let c = crop_window(&snap, win, 1, h, w).unwrap();
        let (a, b) = (c.intrinsics, snap.intrinsics);
        assert!((a.fx - b.fx).abs() < 1e-12 && (a.cx - b.cx).abs() < 1e-12 && (a.cy - b.cy).abs() < 1e-12);
        assert_eq!(c.channel(3), &snap.depth[..]);
    }

    #[test]
    fn adapted_intrinsics_commute_with_projection() {
        let snap = snapshot();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let u0 = rng.random_range(-0.5..60.0);
            let v0 = rng.random_range(-0.5..40.0);
            let win = CropWindow {
                u0,
                u1: u0 + rng.random_range(5.0..60.0),
                v0,
                v1: v0 + rng.random_range(5.0..50.0),
            };
            let c = crop_window(&snap, win, 1, 48, 64).unwrap();
            let p = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(0.3..1.5));
            let orig = snap.intrinsics.project_point(&p);
            let mapped = c.map_point(orig[0], orig[1]);
            let direct = c.intrinsics.project_point(&p);
            assert!((mapped[0] - direct[0]).abs() < 1e-9 && (mapped[1] - direct[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_channel_counts_instance_pixels() {
        let snap = snapshot();
        let id = *snap.instances_in_view().first().unwrap();
        let (w, h) = (snap.width(), snap.height());
        let win = CropWindow {
            u0: 9.5,
            u1: 9.5 + 64.0,
            v0: 19.5,
            v1: 19.5 + 48.0,
        };
        let c = crop_window(&snap, win, id, 48, 64).unwrap();
        let expected = (20..68)
            .flat_map(|i| (10..74).map(move |j| (i, j)))
            .filter(|&(i, j)| i < h && j < w && snap.mask[i * w + j] == id)
            .count();
        let got: f32 = c.channel(4).iter().sum();
        assert_eq!(got as usize, expected);
    }

    #[test]
    fn window_outside_image_is_crop_error() {
        let snap = snapshot();
        let win = CropWindow {
            u0: 500.0,
            u1: 600.0,
            v0: 0.0,
            v1: 10.0,
        };
        assert!(matches!(crop_window(&snap, win, 1, 8, 8), Err(Error::Crop)));
    }
}
