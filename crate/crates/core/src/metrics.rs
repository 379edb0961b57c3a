//! Image quality metrics and aggregation into a results table.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantic_codec::ImageBatch;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Column names of the results CSV.
pub const CSV_HEADER: [&str; 6] = ["method", "channel", "snr_db", "psnr", "ssim", "n"];

fn check_shapes(a: &ImageBatch, b: &ImageBatch) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.pixels().dims(),
            b.pixels().dims()
        )));
    }
    Ok(())
}

/// PSNR of two equally sized pixel slices.
pub fn psnr_slice(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

/// One PSNR value per image.
pub fn psnr_per_image(a: &ImageBatch, b: &ImageBatch, peak: f64) -> Result<Vec<f64>> {
    check_shapes(a, b)?;
    let (va, vb) = (a.to_vec_f64()?, b.to_vec_f64()?);
    let per = a.height() * a.width() * 3;
    Ok(va.chunks(per).zip(vb.chunks(per)).map(|(x, y)| psnr_slice(x, y, peak)).collect())
}

/// Mean per-image PSNR in dB.
pub fn psnr(a: &ImageBatch, b: &ImageBatch, peak: f64) -> Result<f64> {
    Ok(mean(&psnr_per_image(a, b, peak)?))
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Window used for an `h × w` image: the standard 11 taps, or the largest odd
/// size that fits when the image is smaller.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Separable valid-mode filtering of a row-major `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel `h × w` planes.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let taps = gaussian_taps(ssim_window(h, w), SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(a, a), h, w, &taps);
    let bb = filter_valid(&prod(b, b), h, w, &taps);
    let ab = filter_valid(&prod(a, b), h, w, &taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// One SSIM value per image, each the mean over the three channels.
pub fn ssim_per_image(a: &ImageBatch, b: &ImageBatch) -> Result<Vec<f64>> {
    check_shapes(a, b)?;
    let (h, w) = (a.height(), a.width());
    let (va, vb) = (a.to_vec_f64()?, b.to_vec_f64()?);
    let per = h * w * 3;
    let plane = |img: &[f64], c: usize| img.iter().skip(c).step_by(3).copied().collect::<Vec<_>>();
    Ok(va
        .chunks(per)
        .zip(vb.chunks(per))
        .map(|(x, y)| (0..3).map(|c| ssim_plane(&plane(x, c), &plane(y, c), h, w)).sum::<f64>() / 3.0)
        .collect())
}

/// Mean per-image SSIM.
pub fn ssim(a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    Ok(mean(&ssim_per_image(a, b)?))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Psnr,
    Ssim,
}

/// Identifies one evaluation cell. `snr_db` is infinite for a noise-free link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub method: String,
    pub channel: String,
    pub snr_db: f64,
}

impl CellKey {
    pub fn new(method: impl Into<String>, channel: impl Into<String>, snr_db: f64) -> Self {
        Self {
            method: method.into(),
            channel: channel.into(),
            snr_db,
        }
    }

    /// Stable textual id, e.g. `sc-cdm/awgn/10`.
    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.method, self.channel, self.snr_db)
    }

    fn cmp_key(&self, other: &Self) -> Ordering {
        self.method
            .cmp(&other.method)
            .then_with(|| self.channel.cmp(&other.channel))
            .then_with(|| self.snr_db.total_cmp(&other.snr_db))
    }
}

impl Eq for CellKey {}

impl PartialOrd for CellKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CellKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_key(other)
    }
}

/// Per-image values of one metric for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub key: CellKey,
    pub per_image: Vec<f64>,
    pub mean: f64,
}

impl MetricReport {
    pub fn new(metric: MetricKind, key: CellKey, per_image: Vec<f64>) -> Self {
        let mean = mean(&per_image);
        Self {
            metric,
            key,
            per_image,
            mean,
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self.metric {
            MetricKind::Psnr => "psnr",
            MetricKind::Ssim => "ssim",
        }
    }

    pub fn config_id(&self) -> String {
        self.key.id()
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub channel: String,
    #[serde(with = "float_text")]
    pub snr_db: f64,
    #[serde(with = "float_text")]
    pub psnr: f64,
    #[serde(with = "float_text")]
    pub ssim: f64,
    pub n: usize,
}

/// Floats written with `Display` so `inf` and `NaN` survive a round trip.
mod float_text {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let text = String::deserialize(d)?;
        text.trim().parse().map_err(D::Error::custom)
    }
}

impl ResultRow {
    pub fn key(&self) -> CellKey {
        CellKey::new(self.method.clone(), self.channel.clone(), self.snr_db)
    }
}

/// Rows sorted by method, channel, then SNR.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

#[derive(Default)]
struct Acc {
    psnr: (f64, usize),
    ssim: (f64, usize),
}

/// Merges reports sharing a key into one row with image-weighted means.
pub fn aggregate(reports: &[MetricReport]) -> ResultsTable {
    let mut cells: BTreeMap<CellKey, Acc> = BTreeMap::new();
    for r in reports {
        let acc = cells.entry(r.key.clone()).or_default();
        let slot = match r.metric {
            MetricKind::Psnr => &mut acc.psnr,
            MetricKind::Ssim => &mut acc.ssim,
        };
        slot.0 += r.per_image.iter().sum::<f64>();
        slot.1 += r.per_image.len();
    }
    let avg = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
    let rows = cells
        .into_iter()
        .map(|(key, acc)| ResultRow {
            method: key.method,
            channel: key.channel,
            snr_db: key.snr_db,
            psnr: avg(acc.psnr),
            ssim: avg(acc.ssim),
            n: acc.psnr.1.max(acc.ssim.1),
        })
        .collect();
    ResultsTable { rows }
}

impl ResultsTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, method: &str, channel: &str, snr_db: f64) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.channel == channel && r.snr_db == snr_db)
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Config(format!("results csv is not utf-8: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }

    pub fn read_csv<R: io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::Config(format!("unexpected results header {header:?}")));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn img(data: Vec<f32>, side: usize) -> ImageBatch {
        ImageBatch::from_vec(data, 1, side, side, &Device::Cpu).unwrap()
    }

    #[test]
    fn psnr_formula() {
        let a = img(vec![0.5; 8 * 8 * 3], 8);
        let b = img(vec![0.6; 8 * 8 * 3], 8);
        // MSE = 0.01 up to f32 rounding of the pixel values
        let mse = (0.6f32 as f64 - 0.5f32 as f64).powi(2);
        let want = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - want).abs() < 1e-9);
        assert!((want - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn taps_normalised() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t[0], t[10]);
        assert_eq!(ssim_window(32, 32), 11);
        assert_eq!(ssim_window(8, 16), 7);
    }

    #[test]
    fn ssim_identity() {
        let data: Vec<f32> = (0..16 * 16 * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let a = img(data, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_merges_weighted() {
        let k = CellKey::new("a", "awgn", 5.0);
        let t = aggregate(&[
            MetricReport::new(MetricKind::Psnr, k.clone(), vec![10.0]),
            MetricReport::new(MetricKind::Psnr, k.clone(), vec![20.0, 30.0]),
            MetricReport::new(MetricKind::Ssim, k.clone(), vec![0.5, 0.5, 0.8]),
        ]);
        assert_eq!(t.rows.len(), 1);
        assert!((t.rows[0].psnr - 20.0).abs() < 1e-12);
        assert!((t.rows[0].ssim - 0.6).abs() < 1e-12);
        assert_eq!(t.rows[0].n, 3);
        assert!(aggregate(&[]).is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let t = aggregate(&[
            MetricReport::new(MetricKind::Psnr, CellKey::new("b", "awgn", 10.0), vec![25.0]),
            MetricReport::new(MetricKind::Ssim, CellKey::new("b", "awgn", 10.0), vec![0.9]),
            MetricReport::new(MetricKind::Psnr, CellKey::new("a", "rayleigh", f64::INFINITY), vec![30.0]),
        ]);
        let s = t.to_csv_string().unwrap();
        assert!(s.starts_with("method,channel,snr_db,psnr,ssim,n\n"));
        assert_eq!(t.rows[0].method, "a");
        let back = ResultsTable::read_csv(s.as_bytes()).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[1], t.rows[1]);
        assert_eq!(back.rows[0].snr_db, f64::INFINITY);
    }
}
