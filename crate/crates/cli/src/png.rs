use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use slabpen::Volume;

use crate::error::CliError;

pub const WINDOW_PERCENTILE: f64 = 99.5;

/// Value at the given percentile (nearest rank) of `values`.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn to_u8(x: f64, hi: f64) -> u8 {
    if hi <= 0.0 {
        return 0;
    }
    (x / hi * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Magnitude panels placed side by side on one shared `[0, p99.5]` window.
/// Each panel is `(width, height, row-major values)`.
pub fn gray_panels(panels: &[(usize, usize, Vec<f64>)]) -> GrayImage {
    let all: Vec<f64> = panels.iter().flat_map(|p| p.2.iter().copied()).collect();
    let hi = percentile(&all, WINDOW_PERCENTILE);
    let width: usize = panels.iter().map(|p| p.0).sum();
    let height = panels.iter().map(|p| p.1).max().unwrap_or(0);
    let mut img = GrayImage::new(width as u32, height as u32);
    let mut x0 = 0;
    for (w, h, values) in panels {
        for y in 0..*h {
            for x in 0..*w {
                img.put_pixel((x0 + x) as u32, y as u32, Luma([to_u8(values[y * w + x], hi)]));
            }
        }
        x0 += w;
    }
    img
}

/// Sagittal (x = nx/2), coronal (y = ny/2) and axial (z = `z_axial`) magnitude
/// planes. Sagittal and coronal panels run along z vertically.
pub fn orthogonal_triptych(v: &Volume, z_axial: usize) -> GrayImage {
    let [nx, ny, nz] = v.shape();
    let m = v.magnitude();
    let at = |x: usize, y: usize, z: usize| m[v.offset(x, y, z)];
    let sag = (0..nz).flat_map(|z| (0..ny).map(move |y| (y, z))).map(|(y, z)| at(nx / 2, y, z)).collect();
    let cor = (0..nz).flat_map(|z| (0..nx).map(move |x| (x, z))).map(|(x, z)| at(x, ny / 2, z)).collect();
    let ax = (0..ny).flat_map(|y| (0..nx).map(move |x| (x, y))).map(|(x, y)| at(x, y, z_axial)).collect();
    gray_panels(&[(ny, nz, sag), (nx, nz, cor), (nx, ny, ax)])
}

/// Axial plane `z` of a per-voxel RGB field with components in `[0, 1]`.
pub fn rgb_axial(shape: [usize; 3], rgb: &[[f64; 3]], z: usize) -> RgbImage {
    let [nx, ny, _] = shape;
    let mut img = RgbImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let c = rgb[(z * ny + y) * nx + x];
            img.put_pixel(x as u32, y as u32, Rgb(c.map(|v| to_u8(v, 1.0))));
        }
    }
    img
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<(), CliError> {
    img.save(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use slabpen::Complex64;

    #[test]
    fn nearest_rank_percentile() {
        let v: Vec<f64> = (1..=200).map(f64::from).collect();
        assert_eq!(percentile(&v, 99.5), 199.0);
        assert_eq!(percentile(&v, 100.0), 200.0);
        assert_eq!(percentile(&[3.0], 50.0), 3.0);
    }

    #[test]
    fn window_saturates_outliers() {
        let mut values = vec![0.5; 999];
        values.push(100.0);
        let img = gray_panels(&[(1000, 1, values)]);
        assert_eq!(img.get_pixel(0, 0)[0], 255);
        assert_eq!(img.get_pixel(999, 0)[0], 255);
        let img = gray_panels(&[(2, 1, vec![0.0, 0.0])]);
        assert_eq!(img.get_pixel(1, 0)[0], 0);
    }

    #[test]
    fn triptych_layout() {
        let v = Volume::from_fn([4, 3, 5], |x, y, z| Complex64::new((x + 10 * y + 100 * z) as f64, 0.0));
        let img = orthogonal_triptych(&v, 2);
        assert_eq!(img.dimensions(), (3 + 4 + 4, 5));
        // axial panel rows beyond ny stay black
        assert_eq!(img.get_pixel(8, 4)[0], 0);
    }
}
