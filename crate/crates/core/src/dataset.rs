//! The multi-view dataset unit consumed by fusion: per-view RGB, RGB-encoded
//! world-frame normals, masks, and camera poses.

use ndarray::{Array2, Array3};

use crate::camera::CameraPose;
use crate::math;
use crate::{Error, Result};

/// One view's images plus its (possibly imperfect) recorded pose.
#[derive(Debug, Clone)]
pub struct ViewData {
    /// (h, w, 3) in [0, 1].
    pub rgb: Array3<f64>,
    /// (h, w, 3); decodes to a world-frame unit normal via n = 2·rgb − 1.
    pub normal: Array3<f64>,
    /// (h, w) in [0, 1].
    pub mask: Array2<f64>,
    pub pose: CameraPose,
}

#[derive(Debug, Clone)]
pub struct MultiViewSet {
    pub views: Vec<ViewData>,
    pub width: usize,
    pub height: usize,
}

/// Fraction of foreground below which a view carries no usable supervision.
pub const DEGENERATE_MASK_FRACTION: f64 = 0.001;

impl MultiViewSet {
    pub fn new(views: Vec<ViewData>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Dataset("no views".into()));
        }
        let width = views[0].pose.width;
        let height = views[0].pose.height;
        let set = MultiViewSet {
            views,
            width,
            height,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    /// Check the dataset invariants. Returns the indices of views that carry
    /// usable supervision (degenerate masks excluded); callers should warn
    /// about exclusions.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let mut seen = vec![false; self.views.len()];
        for (i, view) in self.views.iter().enumerate() {
            let tag = format!("view {i}");
            view.pose.validate()?;
            if view.pose.view_index >= self.views.len() || seen[view.pose.view_index] {
                return Err(Error::Dataset(format!(
                    "{tag}: duplicate or out-of-range view_index {}",
                    view.pose.view_index
                )));
            }
            seen[view.pose.view_index] = true;
            let (h, w) = (view.rgb.shape()[0], view.rgb.shape()[1]);
            if (w, h) != (self.width, self.height)
                || view.normal.shape() != view.rgb.shape()
                || view.mask.shape() != [h, w]
                || (view.pose.width, view.pose.height) != (w, h)
            {
                return Err(Error::Dataset(format!("{tag}: inconsistent resolution")));
            }
            if view.mask.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
                return Err(Error::Dataset(format!("{tag}: mask outside [0,1]")));
            }
            if view.rgb.iter().any(|v| !v.is_finite()) || view.normal.iter().any(|v| !v.is_finite())
            {
                return Err(Error::Dataset(format!("{tag}: non-finite pixels")));
            }
            // normals must decode to unit vectors where the mask is solid
            for y in 0..h {
                for x in 0..w {
                    if view.mask[[y, x]] > 0.5 {
                        let n = [
                            2.0 * view.normal[[y, x, 0]] - 1.0,
                            2.0 * view.normal[[y, x, 1]] - 1.0,
                            2.0 * view.normal[[y, x, 2]] - 1.0,
                        ];
                        let len = math::norm(n);
                        if (len - 1.0).abs() > 0.05 {
                            return Err(Error::Dataset(format!(
                                "{tag}: normal at ({x},{y}) decodes to |n| = {len:.3}"
                            )));
                        }
                    }
                }
            }
        }
        let usable = self
            .views
            .iter()
            .enumerate()
            .filter(|(_, v)| {
                let fg = v.mask.iter().filter(|&&m| m > 0.5).count();
                (fg as f64) / (v.mask.len() as f64) >= DEGENERATE_MASK_FRACTION
            })
            .map(|(i, _)| i)
            .collect::<Vec<_>>();
        if usable.is_empty() {
            return Err(Error::Dataset("every view has a degenerate mask".into()));
        }
        Ok(usable)
    }

    /// True when the set follows the standard convention: 16 views, evenly
    /// spaced in azimuth at elevation 0. Other layouts are allowed but
    /// callers should flag them as non-standard.
    pub fn is_standard_ring(&self) -> bool {
        if self.views.len() != 16 {
            return false;
        }
        let m = self.views.len();
        for (i, view) in self.views.iter().enumerate() {
            let c = view.pose.center();
            if c[2].abs() > 1e-6 {
                return false;
            }
            let az = c[1].atan2(c[0]);
            let expected = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
            let mut diff = (az - expected).abs();
            if diff > std::f64::consts::PI {
                diff = 2.0 * std::f64::consts::PI - diff;
            }
            if diff > 1e-6 {
                return false;
            }
        }
        true
    }

    /// Decoded world-frame normal at a pixel.
    pub fn decode_normal(&self, view: usize, y: usize, x: usize) -> [f64; 3] {
        let n = &self.views[view].normal;
        [
            2.0 * n[[y, x, 0]] - 1.0,
            2.0 * n[[y, x, 1]] - 1.0,
            2.0 * n[[y, x, 2]] - 1.0,
        ]
    }
}
