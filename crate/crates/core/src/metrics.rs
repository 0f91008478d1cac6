//! RMSE, SRE, SAM and UIQ, per band and aggregated.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView, ArrayView2, ArrayView3, Axis, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BandGroup, ScalingMode};

/// Reported SRE when the squared error vanishes.
pub const SRE_CAP_DB: f64 = 200.0;
pub const SRE_MIN_ERROR: f64 = 1e-12;
pub const SAM_MIN_NORM: f64 = 1e-9;
pub const DEFAULT_UIQ_WINDOW: usize = 8;

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn mse<D: Dimension>(x: &ArrayView<f64, D>, y: &ArrayView<f64, D>) -> f64 {
    let n = x.len().max(1) as f64;
    x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

pub fn rmse<D: Dimension>(x: ArrayView<f64, D>, y: ArrayView<f64, D>) -> Result<f64> {
    same_shape(x.shape(), y.shape())?;
    Ok(mse(&x, &y).sqrt())
}

/// `10 log10(mean(x)^2 / mse)` with `x` the reference.
pub fn sre_db<D: Dimension>(x: ArrayView<f64, D>, y: ArrayView<f64, D>) -> Result<f64> {
    same_shape(x.shape(), y.shape())?;
    let mean = x.mean().unwrap_or(0.0);
    if mean == 0.0 {
        return Err(Error::ZeroReference);
    }
    let err = mse(&x, &y);
    if err < SRE_MIN_ERROR {
        return Ok(SRE_CAP_DB);
    }
    Ok((10.0 * (mean * mean / err).log10()).min(SRE_CAP_DB))
}

/// Mean per-pixel spectral angle in degrees over `[bands, h, w]` stacks.
pub fn sam_deg(x: ArrayView3<f64>, y: ArrayView3<f64>) -> Result<f64> {
    same_shape(x.shape(), y.shape())?;
    let (b, h, w) = x.dim();
    if b < 2 {
        return Err(Error::ShapeMismatch(format!(
            "spectral angle needs at least 2 bands, got {b}"
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in 0..h {
        for c in 0..w {
            let (mut nx, mut ny) = (0.0, 0.0);
            for k in 0..b {
                nx += x[[k, r, c]] * x[[k, r, c]];
                ny += y[[k, r, c]] * y[[k, r, c]];
            }
            let (nx, ny) = (nx.sqrt(), ny.sqrt());
            if nx < SAM_MIN_NORM || ny < SAM_MIN_NORM {
                continue;
            }
            // half-angle form of acos(<x,y> / |x||y|); exact at 0 and stable near it
            let (mut diff, mut sum_) = (0.0, 0.0);
            for k in 0..b {
                let (u, v) = (x[[k, r, c]] / nx, y[[k, r, c]] / ny);
                diff += (u - v) * (u - v);
                sum_ += (u + v) * (u + v);
            }
            sum += 2.0 * diff.sqrt().atan2(sum_.sqrt());
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::AllPixelsDegenerate);
    }
    Ok((sum / n as f64).to_degrees())
}

/// Summed-area table with a zero first row and column.
fn integral(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    let mut s = Array2::zeros((h + 1, w + 1));
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += a[[r, c]];
            s[[r + 1, c + 1]] = s[[r, c + 1]] + row;
        }
    }
    s
}

fn box_sum(s: &Array2<f64>, r: usize, c: usize, k: usize) -> f64 {
    s[[r + k, c + k]] - s[[r, c + k]] - s[[r + k, c]] + s[[r, c]]
}

/// Universal image quality index averaged over all `window`-square positions.
///
/// Windows whose denominator vanishes are skipped. If every window is
/// skipped the images are flat: identical ones score 1, others 0.
pub fn uiq(x: ArrayView2<f64>, y: ArrayView2<f64>, window: usize) -> Result<f64> {
    same_shape(x.shape(), y.shape())?;
    let (h, w) = x.dim();
    if window == 0 || window > h.min(w) {
        return Err(Error::WindowTooLarge {
            window,
            rows: h,
            cols: w,
        });
    }
    // centering keeps the summed-area tables well conditioned
    let (mx, my) = (x.mean().unwrap(), y.mean().unwrap());
    let xc = x.mapv(|v| v - mx);
    let yc = y.mapv(|v| v - my);
    let sx = integral(&xc);
    let sy = integral(&yc);
    let sxx = integral(&(&xc * &xc));
    let syy = integral(&(&yc * &yc));
    let sxy = integral(&(&xc * &yc));
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - window {
        for c in 0..=w - window {
            let ax = box_sum(&sx, r, c, window) / n;
            let ay = box_sum(&sy, r, c, window) / n;
            let vx = (box_sum(&sxx, r, c, window) / n - ax * ax).max(0.0);
            let vy = (box_sum(&syy, r, c, window) / n - ay * ay).max(0.0);
            let cxy = box_sum(&sxy, r, c, window) / n - ax * ay;
            let (ux, uy) = (ax + mx, ay + my);
            let den = (vx + vy) * (ux * ux + uy * uy);
            if den == 0.0 {
                continue;
            }
            total += 4.0 * cxy * ux * uy / den;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(if x == y { 1.0 } else { 0.0 });
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsOptions {
    pub uiq_window: usize,
    /// Aggregate RMSE over all pixels of all bands instead of the band mean.
    #[serde(default)]
    pub pooled_rmse: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            uiq_window: DEFAULT_UIQ_WINDOW,
            pooled_rmse: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandMetrics {
    pub band: String,
    pub rmse: f64,
    pub sre_db: f64,
    pub uiq: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub rmse: f64,
    pub sre_db: f64,
    pub sam_deg: f64,
    pub uiq: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub mode: Option<ScalingMode>,
    pub scene_ids: Vec<String>,
    pub method: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_band: Vec<BandMetrics>,
    pub aggregate: Aggregate,
    pub meta: ReportMeta,
}

fn to_f64(g: &BandGroup) -> ndarray::Array3<f64> {
    g.pixels.mapv(|v| v as f64)
}

/// Scores `sr` against `gt` band by band.
pub fn evaluate(
    sr: &BandGroup,
    gt: &BandGroup,
    options: &MetricsOptions,
    meta: ReportMeta,
) -> Result<MetricsReport> {
    if sr.bands != gt.bands {
        return Err(Error::ShapeMismatch(format!(
            "band lists differ: sr {:?}, gt {:?}",
            sr.bands, gt.bands
        )));
    }
    if sr.pixels.dim() != gt.pixels.dim() {
        return Err(Error::ShapeMismatch(format!(
            "sr grid {:?} differs from gt grid {:?}",
            sr.pixels.dim(),
            gt.pixels.dim()
        )));
    }
    let (x, y) = (to_f64(gt), to_f64(sr));
    let mut per_band = Vec::with_capacity(gt.n_bands());
    for (k, band) in gt.bands.iter().enumerate() {
        let (xb, yb) = (x.index_axis(Axis(0), k), y.index_axis(Axis(0), k));
        let wrap = |e: Error| match e {
            Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("band {band}: {m}")),
            other => other,
        };
        per_band.push(BandMetrics {
            band: band.clone(),
            rmse: rmse(xb, yb)?,
            sre_db: sre_db(xb, yb).map_err(wrap)?,
            uiq: uiq(xb, yb, options.uiq_window).map_err(wrap)?,
        });
    }
    let mean_of = |f: fn(&BandMetrics) -> f64| per_band.iter().map(f).sum::<f64>() / per_band.len() as f64;
    let agg_rmse = if options.pooled_rmse {
        rmse(x.view(), y.view())?
    } else {
        mean_of(|b| b.rmse)
    };
    let aggregate = Aggregate {
        rmse: agg_rmse,
        sre_db: mean_of(|b| b.sre_db),
        sam_deg: sam_deg(x.view(), y.view())?,
        uiq: mean_of(|b| b.uiq),
    };
    Ok(MetricsReport {
        per_band,
        aggregate,
        meta,
    })
}

impl MetricsReport {
    /// Equal-weight mean of reports over the same band list (one per scene).
    pub fn mean_of(reports: &[MetricsReport], method: &str) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidConfig("no reports to combine".into()))?;
        let n = reports.len() as f64;
        let mut per_band = first.per_band.clone();
        for (k, b) in per_band.iter_mut().enumerate() {
            let mut acc = (0.0, 0.0, 0.0);
            for r in reports {
                let o = r.per_band.get(k).filter(|o| o.band == b.band).ok_or_else(|| {
                    Error::ShapeMismatch(format!("reports disagree on band {}", b.band))
                })?;
                acc = (acc.0 + o.rmse, acc.1 + o.sre_db, acc.2 + o.uiq);
            }
            (b.rmse, b.sre_db, b.uiq) = (acc.0 / n, acc.1 / n, acc.2 / n);
        }
        let avg = |f: fn(&Aggregate) -> f64| reports.iter().map(|r| f(&r.aggregate)).sum::<f64>() / n;
        Ok(MetricsReport {
            per_band,
            aggregate: Aggregate {
                rmse: avg(|a| a.rmse),
                sre_db: avg(|a| a.sre_db),
                sam_deg: avg(|a| a.sam_deg),
                uiq: avg(|a| a.uiq),
            },
            meta: ReportMeta {
                mode: first.meta.mode,
                scene_ids: reports.iter().flat_map(|r| r.meta.scene_ids.clone()).collect(),
                method: method.to_string(),
            },
        })
    }

    /// Per-band RMSE row with the band average, one column per band.
    pub fn band_table(&self) -> String {
        let mut out = format!("{:<12}", "Method");
        for b in &self.per_band {
            let _ = write!(out, "{:>9}", b.band);
        }
        let _ = writeln!(out, "{:>9}", "Avg.");
        let _ = write!(out, "{:<12}", self.meta.method);
        for b in &self.per_band {
            let _ = write!(out, "{:>9.1}", b.rmse);
        }
        let mean = self.per_band.iter().map(|b| b.rmse).sum::<f64>() / self.per_band.len().max(1) as f64;
        let _ = writeln!(out, "{mean:>9.1}");
        out
    }
}

/// Comparison table with columns RMSE, SRE, SAM, UIQ; rows sorted by RMSE.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let mut rows: Vec<&MetricsReport> = reports.iter().collect();
    rows.sort_by(|a, b| a.aggregate.rmse.total_cmp(&b.aggregate.rmse));
    let width = rows
        .iter()
        .map(|r| r.meta.method.len())
        .max()
        .unwrap_or(0)
        .max(6);
    let mut out = format!(
        "{:<width$}  {:>9}  {:>8}  {:>7}  {:>7}\n",
        "Method", "RMSE", "SRE", "SAM", "UIQ"
    );
    for r in rows {
        let a = r.aggregate;
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.2}  {:>8.2}  {:>7.3}  {:>7.4}",
            r.meta.method, a.rmse, a.sre_db, a.sam_deg, a.uiq
        );
    }
    out
}
