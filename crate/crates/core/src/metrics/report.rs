use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw absolute-error sums behind the pixel-averaged variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionErrorSums {
    pub shadow: (f64, usize),
    pub nonshadow: (f64, usize),
    pub all: (f64, usize),
}

impl RegionErrorSums {
    pub(crate) fn set(&mut self, region: usize, sum: f64, count: usize) {
        match region {
            0 => self.shadow = (sum, count),
            1 => self.nonshadow = (sum, count),
            _ => self.all = (sum, count),
        }
    }
}

/// Metrics of one image. `rmse_*` follow the literature convention (mean
/// absolute LAB error); missing values mean the region was empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub rmse_shadow: Option<f64>,
    pub rmse_nonshadow: Option<f64>,
    pub rmse_all: Option<f64>,
    pub psnr_shadow: Option<f64>,
    pub psnr_nonshadow: Option<f64>,
    pub psnr_all: Option<f64>,
    pub ssim_shadow: Option<f64>,
    pub ssim_nonshadow: Option<f64>,
    pub ssim_all: Option<f64>,
    #[serde(skip)]
    pub sums: RegionErrorSums,
}

impl ImageMetrics {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            ..Default::default()
        }
    }

    fn columns(&self) -> [Option<f64>; 9] {
        [
            self.rmse_shadow,
            self.rmse_nonshadow,
            self.rmse_all,
            self.psnr_shadow,
            self.psnr_nonshadow,
            self.psnr_all,
            self.ssim_shadow,
            self.ssim_nonshadow,
            self.ssim_all,
        ]
    }
}

const COLUMNS: [&str; 9] = [
    "rmse_shadow",
    "rmse_nonshadow",
    "rmse_all",
    "psnr_shadow",
    "psnr_nonshadow",
    "psnr_all",
    "ssim_shadow",
    "ssim_nonshadow",
    "ssim_all",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_shadow: Option<f64>,
    pub rmse_nonshadow: Option<f64>,
    pub rmse_all: Option<f64>,
    pub psnr_shadow: Option<f64>,
    pub psnr_nonshadow: Option<f64>,
    pub psnr_all: Option<f64>,
    pub ssim_shadow: Option<f64>,
    pub ssim_nonshadow: Option<f64>,
    pub ssim_all: Option<f64>,
    /// Absolute LAB error averaged over every pixel of every image (shadow region).
    pub pixel_averaged_rmse: Option<f64>,
    pub pixel_averaged_rmse_nonshadow: Option<f64>,
    pub pixel_averaged_rmse_all: Option<f64>,
    pub per_image: Vec<ImageMetrics>,
    /// Inputs left out of the aggregate, with the reason.
    pub skipped: Vec<String>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn pooled(sums: impl Iterator<Item = (f64, usize)>) -> Option<f64> {
    let (s, n) = sums.fold((0.0, 0usize), |(s, n), (a, b)| (s + a, n + b));
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    /// Aggregate per-image records: per-image metrics are averaged over images,
    /// the pixel-averaged variant pools error sums over all pixels.
    pub fn from_images(per_image: Vec<ImageMetrics>, skipped: Vec<String>) -> Self {
        let col = |i: usize| mean_of(per_image.iter().map(|m| m.columns()[i]));
        Self {
            rmse_shadow: col(0),
            rmse_nonshadow: col(1),
            rmse_all: col(2),
            psnr_shadow: col(3),
            psnr_nonshadow: col(4),
            psnr_all: col(5),
            ssim_shadow: col(6),
            ssim_nonshadow: col(7),
            ssim_all: col(8),
            pixel_averaged_rmse: pooled(per_image.iter().map(|m| m.sums.shadow)),
            pixel_averaged_rmse_nonshadow: pooled(per_image.iter().map(|m| m.sums.nonshadow)),
            pixel_averaged_rmse_all: pooled(per_image.iter().map(|m| m.sums.all)),
            per_image,
            skipped,
        }
    }

    fn aggregate_columns(&self) -> [Option<f64>; 9] {
        [
            self.rmse_shadow,
            self.rmse_nonshadow,
            self.rmse_all,
            self.psnr_shadow,
            self.psnr_nonshadow,
            self.psnr_all,
            self.ssim_shadow,
            self.ssim_nonshadow,
            self.ssim_all,
        ]
    }

    /// One row per image, then a `mean` row. Empty cells mark empty regions.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        let mut header = vec!["image"];
        header.extend(COLUMNS);
        w.write_record(&header).map_err(csv_err)?;
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for m in &self.per_image {
            let mut row = vec![m.name.clone()];
            row.extend(m.columns().into_iter().map(fmt));
            w.write_record(&row).map_err(csv_err)?;
        }
        let mut row = vec!["mean".to_owned()];
        row.extend(self.aggregate_columns().into_iter().map(fmt));
        w.write_record(&row).map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(csv_path)?)?;
        std::fs::write(json_path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(name: &str, rmse: f64, sum: f64, n: usize) -> ImageMetrics {
        let mut m = ImageMetrics::named(name);
        m.rmse_shadow = Some(rmse);
        m.rmse_all = Some(rmse);
        m.sums.shadow = (sum, n);
        m
    }

    #[test]
    fn per_image_mean_differs_from_pixel_pooling() {
        let r = MetricsReport::from_images(
            vec![record("a", 2.0, 20.0, 10), record("b", 4.0, 400.0, 100)],
            vec![],
        );
        assert_eq!(r.rmse_shadow, Some(3.0));
        assert_eq!(r.pixel_averaged_rmse, Some(420.0 / 110.0));
        assert_eq!(r.rmse_nonshadow, None);
    }

    #[test]
    fn csv_has_aggregate_row_last() {
        let r = MetricsReport::from_images(vec![record("a", 2.0, 2.0, 1)], vec![]);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("image,rmse_shadow,rmse_nonshadow"));
        assert!(lines[2].starts_with("mean,2.000000,,2.000000"));
        let json: MetricsReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(json.rmse_shadow, r.rmse_shadow);
    }
}
