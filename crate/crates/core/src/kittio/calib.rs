//! Per-frame camera/lidar calibration in the KITTI text layout
//! (`key: v0 v1 ...`, row-major).

use std::path::Path;

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Mat34 = [[f64; 4]; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub p2: Mat34,
    pub r0_rect: Mat3,
    pub tr_velo_to_cam: Mat34,
}

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn mat3_mul_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn mat3_transpose(m: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [m[0][i], m[1][i], m[2][i]])
}

fn mat3_inverse(m: &Mat3) -> Option<Mat3> {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
        [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
        [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
    ];
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    if det.abs() < 1e-12 {
        return None;
    }
    // inverse = adjugate / det, adjugate = cofactorᵀ
    Some([0, 1, 2].map(|i| [0, 1, 2].map(|j| cof[j][i] / det)))
}

impl CalibrationSet {
    /// `P2 = [I|0]`, `R0 = I`, `Tr = [I|0]`.
    pub fn identity() -> Self {
        let i34 = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        Self {
            p2: i34,
            r0_rect: IDENTITY3,
            tr_velo_to_cam: i34,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let all = self
            .p2
            .iter()
            .chain(self.tr_velo_to_cam.iter())
            .flatten()
            .chain(self.r0_rect.iter().flatten());
        if all.clone().any(|v| !v.is_finite()) {
            return Err("non-finite calibration value".into());
        }
        let rrt = {
            let t = mat3_transpose(&self.r0_rect);
            [0, 1, 2].map(|i| [0, 1, 2].map(|j| (0..3).map(|k| self.r0_rect[i][k] * t[k][j]).sum::<f64>()))
        };
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rrt[i][j] - expect).abs() > 1e-3 {
                    return Err(format!("R0_rect is not orthonormal (R·Rᵀ[{i}][{j}] = {})", rrt[i][j]));
                }
            }
        }
        if mat3_inverse(&self.rotation()).is_none() {
            return Err("Tr_velo_to_cam rotation is singular".into());
        }
        Ok(())
    }

    fn rotation(&self) -> Mat3 {
        [0, 1, 2].map(|i| [self.tr_velo_to_cam[i][0], self.tr_velo_to_cam[i][1], self.tr_velo_to_cam[i][2]])
    }

    /// Lidar point → rectified camera frame: `R0 · (R·p + t)`.
    pub fn lidar_to_rect(&self, p: [f64; 3]) -> [f64; 3] {
        let tr = &self.tr_velo_to_cam;
        let cam = [0, 1, 2].map(|i| tr[i][0] * p[0] + tr[i][1] * p[1] + tr[i][2] * p[2] + tr[i][3]);
        mat3_mul_vec(&self.r0_rect, cam)
    }

    /// Inverse of [`CalibrationSet::lidar_to_rect`].
    pub fn rect_to_lidar(&self, p: [f64; 3]) -> [f64; 3] {
        let r0_inv = mat3_inverse(&self.r0_rect).unwrap_or_else(|| mat3_transpose(&self.r0_rect));
        let cam = mat3_mul_vec(&r0_inv, p);
        let rot = self.rotation();
        let rot_inv = mat3_inverse(&rot).unwrap_or_else(|| mat3_transpose(&rot));
        let t = [self.tr_velo_to_cam[0][3], self.tr_velo_to_cam[1][3], self.tr_velo_to_cam[2][3]];
        mat3_mul_vec(&rot_inv, [cam[0] - t[0], cam[1] - t[1], cam[2] - t[2]])
    }

    /// Direction (no translation) lidar → rectified camera.
    pub fn lidar_dir_to_rect(&self, d: [f64; 3]) -> [f64; 3] {
        mat3_mul_vec(&self.r0_rect, mat3_mul_vec(&self.rotation(), d))
    }

    pub fn rect_dir_to_lidar(&self, d: [f64; 3]) -> [f64; 3] {
        let r0_inv = mat3_inverse(&self.r0_rect).unwrap_or_else(|| mat3_transpose(&self.r0_rect));
        let rot = self.rotation();
        let rot_inv = mat3_inverse(&rot).unwrap_or_else(|| mat3_transpose(&rot));
        mat3_mul_vec(&rot_inv, mat3_mul_vec(&r0_inv, d))
    }

    /// Rectified camera point → homogeneous image coordinates `P2·[p;1]`.
    pub fn rect_to_image_h(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| self.p2[i][0] * p[0] + self.p2[i][1] * p[1] + self.p2[i][2] * p[2] + self.p2[i][3])
    }
}

fn parse_row<const N: usize>(vals: &[f64], key: &str, path: &Path, line: usize) -> Result<[f64; N]> {
    vals.try_into().map_err(|_| {
        Error::format(path, Some(line), format!("{key} needs {N} values, found {}", vals.len()))
    })
}

pub fn parse_calibration(text: &str, path: &Path) -> Result<CalibrationSet> {
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else {
            return Err(Error::format(path, Some(lineno), "expected `key: values`"));
        };
        let key = key.trim();
        if !matches!(key, "P2" | "R0_rect" | "R_rect" | "Tr_velo_to_cam" | "Tr_velo_cam") {
            continue;
        }
        let vals = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format(path, Some(lineno), format!("bad number {t:?} in {key}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match key {
            "P2" => {
                let v: [f64; 12] = parse_row(&vals, key, path, lineno)?;
                p2 = Some([0, 1, 2].map(|r| [v[4 * r], v[4 * r + 1], v[4 * r + 2], v[4 * r + 3]]));
            }
            "R0_rect" | "R_rect" => {
                let v: [f64; 9] = parse_row(&vals, key, path, lineno)?;
                r0 = Some([0, 1, 2].map(|r| [v[3 * r], v[3 * r + 1], v[3 * r + 2]]));
            }
            _ => {
                let v: [f64; 12] = parse_row(&vals, key, path, lineno)?;
                tr = Some([0, 1, 2].map(|r| [v[4 * r], v[4 * r + 1], v[4 * r + 2], v[4 * r + 3]]));
            }
        }
    }
    let missing: Vec<&str> = [("P2", p2.is_none()), ("R0_rect", r0.is_none()), ("Tr_velo_to_cam", tr.is_none())]
        .iter()
        .filter(|(_, m)| *m)
        .map(|(k, _)| *k)
        .collect();
    if !missing.is_empty() {
        return Err(Error::format(path, None, format!("missing key(s): {}", missing.join(", "))));
    }
    let calib = CalibrationSet {
        p2: p2.expect("checked"),
        r0_rect: r0.expect("checked"),
        tr_velo_to_cam: tr.expect("checked"),
    };
    calib.validate().map_err(|m| Error::format(path, None, m))?;
    Ok(calib)
}

pub fn load_calibration(path: &Path) -> Result<CalibrationSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calibration(&text, path)
}

/// Writes the three keys this crate reads; values use shortest round-trip
/// formatting.
pub fn format_calibration(c: &CalibrationSet) -> String {
    let row = |v: Vec<f64>| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
    format!(
        "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
        row(c.p2.iter().flatten().copied().collect()),
        row(c.r0_rect.iter().flatten().copied().collect()),
        row(c.tr_velo_to_cam.iter().flatten().copied().collect()),
    )
}

pub fn write_calibration(c: &CalibrationSet, path: &Path) -> Result<()> {
    std::fs::write(path, format_calibration(c)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENT: &str = "P2: 1 0 0 0 0 1 0 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";

    // Rows of a KITTI object-benchmark training calibration file (frame 000000).
    const KITTI_SAMPLE: &str = "\
P0: 7.070493000000e+02 0.000000000000e+00 6.040814000000e+02 0.000000000000e+00 0.000000000000e+00 7.070493000000e+02 1.805066000000e+02 0.000000000000e+00 0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 0.000000000000e+00
P2: 7.070493000000e+02 0.000000000000e+00 6.040814000000e+02 4.575831000000e+01 0.000000000000e+00 7.070493000000e+02 1.805066000000e+02 -3.454157000000e-01 0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 4.981016000000e-03
R0_rect: 9.999128000000e-01 1.009263000000e-02 -8.511932000000e-03 -1.012729000000e-02 9.999406000000e-01 -4.037671000000e-03 8.470675000000e-03 4.123522000000e-03 9.999556000000e-01
Tr_velo_to_cam: 6.927964000000e-03 -9.999722000000e-01 -2.757829000000e-03 -2.457729000000e-02 -1.162982000000e-03 2.749836000000e-03 -9.999955000000e-01 -6.127237000000e-02 9.999753000000e-01 6.931141000000e-03 -1.143899000000e-03 -3.321029000000e-01
Tr_imu_to_velo: 9.999976000000e-01 7.553071000000e-04 -2.035826000000e-03 -8.086759000000e-01 -7.854027000000e-04 9.998898000000e-01 -1.482298000000e-02 3.195559000000e-01 2.024406000000e-03 1.482454000000e-02 9.998881000000e-01 -7.997231000000e-01
";

    #[test]
    fn identity_calibration() {
        let c = parse_calibration(IDENT, Path::new("c.txt")).unwrap();
        assert_eq!(c, CalibrationSet::identity());
        assert_eq!(c.lidar_to_rect([1.0, 2.0, 3.0]), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn whitespace_variants_parse_identically() {
        let messy = "\n  P2:1   0 0 0\t0 1 0 0 0 0 1 0  \r\n\nR0_rect :  1 0 0 0 1 0 0 0 1\nTr_velo_to_cam:\t1 0 0 0 0 1 0 0 0 0 1 0";
        assert_eq!(
            parse_calibration(messy, Path::new("m.txt")).unwrap(),
            parse_calibration(IDENT, Path::new("c.txt")).unwrap()
        );
    }

    #[test]
    fn missing_key_is_format_error() {
        let text = "P2: 1 0 0 0 0 1 0 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\n";
        let err = parse_calibration(text, Path::new("x.txt")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("Tr_velo_to_cam"));
    }

    #[test]
    fn nonfinite_and_short_rows_rejected() {
        let bad = IDENT.replace("R0_rect: 1 0 0", "R0_rect: nan 0 0");
        assert!(parse_calibration(&bad, Path::new("x")).is_err());
        let short = IDENT.replace("P2: 1 0 0 0 ", "P2: ");
        assert!(parse_calibration(&short, Path::new("x")).is_err());
    }

    #[test]
    fn published_sample_p2_matches_hand_parsed_values() {
        let c = parse_calibration(KITTI_SAMPLE, Path::new("000000.txt")).unwrap();
        let expect = [
            [707.0493, 0.0, 604.0814, 45.75831],
            [0.0, 707.0493, 180.5066, -0.3454157],
            [0.0, 0.0, 1.0, 0.004981016],
        ];
        for r in 0..3 {
            for k in 0..4 {
                assert!(c.p2[r][k].is_finite());
                assert!((c.p2[r][k] - expect[r][k]).abs() < 1e-12, "{r},{k}");
            }
        }
        let p = [12.0, -3.0, -0.5];
        let back = c.rect_to_lidar(c.lidar_to_rect(p));
        for k in 0..3 {
            assert!((back[k] - p[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn format_roundtrip() {
        let c = parse_calibration(KITTI_SAMPLE, Path::new("000000.txt")).unwrap();
        let again = parse_calibration(&format_calibration(&c), Path::new("w")).unwrap();
        assert_eq!(again, c);
    }
}
