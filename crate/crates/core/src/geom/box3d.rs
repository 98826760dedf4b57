use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Oriented box in the lidar frame. `l` runs along the heading (`yaw`,
/// measured from +x towards +y), `w` across it, `h` vertically; `cz` is the
/// vertical centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(cx: f64, cy: f64, cz: f64, w: f64, l: f64, h: f64, yaw: f64) -> Result<Self> {
        let b = Self {
            cx,
            cy,
            cz,
            w,
            l,
            h,
            yaw: normalize_angle(yaw),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite box {self:?}")));
        }
        if !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0) {
            return Err(Error::contract(format!("degenerate box dims {self:?}")));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw]
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    pub fn z_min(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.cz + 0.5 * self.h
    }

    /// Footprint corners, counter-clockwise, starting front-left.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(dx, dy)| [self.cx + dx * c - dy * s, self.cy + dx * s + dy * c])
    }

    /// Eight corners: bottom face (CCW) then top face.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let f = self.bev_corners();
        let mut out = [[0.0; 3]; 8];
        for i in 0..4 {
            out[i] = [f[i][0], f[i][1], self.z_min()];
            out[i + 4] = [f[i][0], f[i][1], self.z_max()];
        }
        out
    }

    /// Half-diagonal of the footprint; bounds the distance from the centre to
    /// any footprint point.
    pub fn bev_radius(&self) -> f64 {
        0.5 * self.w.hypot(self.l)
    }

    /// Coordinates of `(x, y)` in the box's local frame.
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * c + dy * s, -dx * s + dy * c)
    }

    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.to_local(x, y);
        lx.abs() <= 0.5 * self.l && ly.abs() <= 0.5 * self.w
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        self.contains_bev(x, y) && z >= self.z_min() && z <= self.z_max()
    }
}
