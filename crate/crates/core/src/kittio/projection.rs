use super::calib::CalibrationSet;
use super::image::ImageRaster;
use super::pointcloud::{Point, RawPointCloud};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Depth along the rectified camera axis.
    pub depth: f64,
    pub valid: bool,
}

/// Lidar points with their sampled image colour. `rgb` is zero wherever
/// `in_image` is false.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecoratedPointCloud {
    pub points: Vec<Point>,
    pub rgb: Vec<[f64; 3]>,
    pub in_image: Vec<bool>,
}

impl DecoratedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every point marked out of image with black colour.
    pub fn without_image(cloud: &RawPointCloud) -> Self {
        Self {
            points: cloud.points.clone(),
            rgb: vec![[0.0; 3]; cloud.len()],
            in_image: vec![false; cloud.len()],
        }
    }
}

pub fn project_point(p: &Point, calib: &CalibrationSet, width: usize, height: usize) -> Projection {
    let rect = calib.lidar_to_rect([p.x, p.y, p.z]);
    let h = calib.rect_to_image_h(rect);
    let (u, v) = (h[0] / h[2], h[1] / h[2]);
    let valid = rect[2] > 0.0
        && h[2] != 0.0
        && u.is_finite()
        && v.is_finite()
        && (0.0..width as f64).contains(&u)
        && (0.0..height as f64).contains(&v);
    Projection { u, v, depth: rect[2], valid }
}

/// Invalid points are flagged, never dropped.
pub fn project_points(cloud: &RawPointCloud, calib: &CalibrationSet, image: &ImageRaster) -> Vec<Projection> {
    cloud
        .points
        .iter()
        .map(|p| project_point(p, calib, image.width(), image.height()))
        .collect()
}

/// Nearest pixel to `(u, v)`, clamped into the raster.
pub fn nearest_pixel(u: f64, v: f64, image: &ImageRaster) -> (usize, usize) {
    let clamp = |x: f64, n: usize| (x.round().max(0.0) as usize).min(n.saturating_sub(1));
    (clamp(u, image.width()), clamp(v, image.height()))
}

pub fn attach_rgb(cloud: &RawPointCloud, projection: &[Projection], image: &ImageRaster) -> DecoratedPointCloud {
    assert_eq!(cloud.len(), projection.len(), "projection computed for a different cloud");
    let mut out = DecoratedPointCloud::without_image(cloud);
    if image.width() == 0 || image.height() == 0 {
        return out;
    }
    for (i, pr) in projection.iter().enumerate() {
        if pr.valid {
            let (u, v) = nearest_pixel(pr.u, pr.v, image);
            out.rgb[i] = image.pixel_normalized(u, v);
            out.in_image[i] = true;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> RawPointCloud {
        RawPointCloud {
            points: pts.iter().map(|p| Point::new(p[0], p[1], p[2], 0.5)).collect(),
        }
    }

    #[test]
    fn identity_projection_at_origin() {
        let img = ImageRaster::filled(4, 4, [0, 0, 0]);
        let pr = project_points(&cloud(&[[0.0, 0.0, 5.0]]), &CalibrationSet::identity(), &img);
        assert_eq!((pr[0].u, pr[0].v), (0.0, 0.0));
        assert!(pr[0].valid);
    }

    #[test]
    fn negative_depth_is_invalid() {
        let img = ImageRaster::filled(100, 100, [0, 0, 0]);
        // (u, v) = (0.2, 0.2) would be in-raster, depth is not
        let pr = project_points(&cloud(&[[-1.0, -1.0, -5.0]]), &CalibrationSet::identity(), &img);
        assert!(!pr[0].valid);
    }

    /// Full 4×4 homogeneous chain built and multiplied independently.
    fn oracle(c: &CalibrationSet, p: [f64; 3]) -> (f64, f64, f64) {
        let mut tr = [[0.0; 4]; 4];
        let mut r0 = [[0.0; 4]; 4];
        for i in 0..3 {
            tr[i] = c.tr_velo_to_cam[i];
            for j in 0..3 {
                r0[i][j] = c.r0_rect[i][j];
            }
        }
        tr[3][3] = 1.0;
        r0[3][3] = 1.0;
        let mul = |a: &[[f64; 4]; 4], x: [f64; 4]| -> [f64; 4] {
            let mut y = [0.0; 4];
            for i in 0..4 {
                for j in 0..4 {
                    y[i] += a[i][j] * x[j];
                }
            }
            y
        };
        let cam = mul(&r0, mul(&tr, [p[0], p[1], p[2], 1.0]));
        let mut img = [0.0; 3];
        for i in 0..3 {
            for j in 0..4 {
                img[i] += c.p2[i][j] * cam[j];
            }
        }
        (img[0] / img[2], img[1] / img[2], cam[2])
    }

    fn random_calib(rng: &mut impl Rng) -> CalibrationSet {
        // rotation from a random unit quaternion
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [a, b, c, d] = q.map(|v| v / n);
        let rot = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a - b * b + c * c - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a - b * b - c * c + d * d],
        ];
        let f = rng.gen_range(100.0..800.0);
        let mut tr = [[0.0; 4]; 3];
        for i in 0..3 {
            tr[i][..3].copy_from_slice(&rot[i]);
            tr[i][3] = rng.gen_range(-0.5..0.5);
        }
        CalibrationSet {
            p2: [
                [f, 0.0, rng.gen_range(0.0..600.0), rng.gen_range(-50.0..50.0)],
                [0.0, f, rng.gen_range(0.0..200.0), rng.gen_range(-1.0..1.0)],
                [0.0, 0.0, 1.0, rng.gen_range(-0.01..0.01)],
            ],
            r0_rect: super::super::calib::IDENTITY3,
            tr_velo_to_cam: tr,
        }
    }

    #[test]
    fn projection_matches_homogeneous_chain_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut kitti = super::super::calib::parse_calibration(
            "P2: 707.0493 0 604.0814 45.75831 0 707.0493 180.5066 -0.3454157 0 0 1 0.004981016\n\
             R0_rect: 0.9999128 0.01009263 -0.008511932 -0.01012729 0.9999406 -0.004037671 0.008470675 0.004123522 0.9999556\n\
             Tr_velo_to_cam: 0.006927964 -0.9999722 -0.002757829 -0.02457729 -0.001162982 0.002749836 -0.9999955 -0.06127237 0.9999753 0.006931141 -0.001143899 -0.3321029\n",
            std::path::Path::new("k"),
        )
        .unwrap();
        let img = ImageRaster::filled(1242, 375, [0, 0, 0]);
        for round in 0..2 {
            let pts: Vec<[f64; 3]> = (0..20)
                .map(|_| [rng.gen_range(2.0..40.0), rng.gen_range(-15.0..15.0), rng.gen_range(-2.0..1.0)])
                .collect();
            let pr = project_points(&cloud(&pts), &kitti, &img);
            for (p, q) in pts.iter().zip(&pr) {
                let (u, v, z) = oracle(&kitti, *p);
                assert!((u - q.u).abs() < 1e-9 && (v - q.v).abs() < 1e-9, "round {round}");
                let inside = z > 0.0 && u >= 0.0 && u < 1242.0 && v >= 0.0 && v < 375.0;
                assert_eq!(inside, q.valid);
            }
            kitti = random_calib(&mut rng);
        }
    }

    #[test]
    fn uniform_gray_image() {
        let img = ImageRaster::filled(8, 8, [128, 128, 128]);
        let c = cloud(&[[1.0, 1.0, 1.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]);
        let d = attach_rgb(&c, &project_points(&c, &CalibrationSet::identity(), &img), &img);
        assert_eq!(d.in_image, vec![true, true, false]);
        assert_eq!(d.rgb[0], [128.0 / 255.0; 3]);
        assert_eq!(d.rgb[2], [0.0; 3]);
    }

    #[test]
    fn points_behind_camera_get_no_colour() {
        let img = ImageRaster::filled(8, 8, [200, 10, 10]);
        let c = cloud(&[[0.1, 0.1, -1.0], [3.0, 2.0, -0.5]]);
        let d = attach_rgb(&c, &project_points(&c, &CalibrationSet::identity(), &img), &img);
        assert!(d.in_image.iter().all(|v| !v));
        assert!(d.rgb.iter().all(|c| *c == [0.0; 3]));
    }

    #[test]
    fn checkerboard_matches_direct_lookup() {
        let (w, h) = (16, 12);
        let mut img = ImageRaster::filled(w, h, [0, 0, 0]);
        for v in 0..h {
            for u in 0..w {
                let on = (u + v) % 2 == 0;
                img.set_pixel(u, v, if on { [255, 255, 255] } else { [0, 0, 0] });
            }
        }
        let mut calib = CalibrationSet::identity();
        calib.p2 = [[4.0, 0.0, 8.0, 0.0], [0.0, 4.0, 6.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 3]> = (0..300)
            .map(|_| [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(0.5..3.0)])
            .collect();
        let c = cloud(&pts);
        let pr = project_points(&c, &calib, &img);
        let d = attach_rgb(&c, &pr, &img);
        for (i, p) in pr.iter().enumerate() {
            if !p.valid {
                continue;
            }
            let (u, v) = ((p.u.round() as usize).min(w - 1), (p.v.round() as usize).min(h - 1));
            let expect = if (u + v) % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(d.rgb[i], [expect; 3]);
        }
        assert!(d.in_image.iter().filter(|v| **v).count() > 50);
    }

    proptest! {
        #[test]
        fn attach_stays_in_bounds_and_validity_grows_with_raster(
            seed in 0u64..10_000, w in 1usize..64, h in 1usize..64, grow in 0usize..64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let calib = random_calib(&mut rng);
            let pts: Vec<[f64; 3]> = (0..40)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-30.0..30.0)))
                .collect();
            let c = cloud(&pts);
            let small = ImageRaster::filled(w, h, [9, 9, 9]);
            let big = ImageRaster::filled(w + grow, h + grow, [9, 9, 9]);
            let ps = project_points(&c, &calib, &small);
            let pb = project_points(&c, &calib, &big);
            let d = attach_rgb(&c, &ps, &small);
            for i in 0..c.len() {
                prop_assert!(!ps[i].valid || pb[i].valid);
                prop_assert_eq!(d.in_image[i], ps[i].valid);
                if !d.in_image[i] {
                    prop_assert_eq!(d.rgb[i], [0.0; 3]);
                }
            }
        }
    }
}
