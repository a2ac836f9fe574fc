//! Rollout metrics, Taylor dispersion and the ACH-BZE power law.

use crate::archive::RolloutArchive;
use crate::consts::{BREATHING_ZONE, DT, L_REF, ROOM_HEIGHT, T_START};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::parcel::Frame;
use crate::physics::{self, AirProperties, DropletProperties, NonDimGroups, RoomGeometry};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

const TIME_TOL: f64 = 1e-6;
/// Fit window of the diffusive regime as fractions of the largest lag.
pub const FIT_WINDOW: (f64, f64) = (0.4, 0.75);

/// Mean displacement error in percent of `l_ref`. `None` when no parcel is
/// selected by the mask.
pub fn mde(pred: &[Vec2], gt: &[Vec2], mask: &[bool], l_ref: f64) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, g), &m) in pred.iter().zip(gt).zip(mask) {
        if m {
            sum += (*p - *g).norm();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64 / l_ref * 100.0)
}

/// Kinetic-energy ratio from backward differences of stored positions.
/// `None` when nothing is selected or the reference is at rest.
pub fn ke_ratio(
    pred_prev: &[Vec2],
    pred: &[Vec2],
    gt_prev: &[Vec2],
    gt: &[Vec2],
    mask: &[bool],
    dt: f64,
) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    let mut n = 0usize;
    for i in 0..mask.len() {
        if !mask[i] {
            continue;
        }
        num += ((pred[i] - pred_prev[i]) / dt).norm_sq();
        den += ((gt[i] - gt_prev[i]) / dt).norm_sq();
        n += 1;
    }
    (n > 0 && den > 0.0).then(|| num / den)
}

/// Radius of gyration of the selected parcels.
pub fn radius_of_gyration(x: &[Vec2], mask: &[bool]) -> Option<f64> {
    let sel: Vec<Vec2> = x.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    if sel.is_empty() {
        return None;
    }
    let n = sel.len() as f64;
    let c = sel.iter().fold(Vec2::ZERO, |a, &p| a + p) / n;
    Some((sel.iter().map(|&p| (p - c).norm_sq()).sum::<f64>() / n).sqrt())
}

/// Relative radius-of-gyration error in percent, with both radii.
/// Zero when both radii vanish and undefined when only the reference does.
pub fn rg_err(pred: &[Vec2], gt: &[Vec2], mask: &[bool]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let rp = radius_of_gyration(pred, mask);
    let rg = radius_of_gyration(gt, mask);
    let err = match (rp, rg) {
        (Some(p), Some(g)) if g > 0.0 => Some((p - g).abs() / g * 100.0),
        (Some(p), Some(_)) if p == 0.0 => Some(0.0),
        _ => None,
    };
    (err, rp, rg)
}

/// Percentage of alive parcels inside the closed breathing-zone rectangle.
pub fn bze(x: &[Vec2], alive: &[bool]) -> Option<f64> {
    let mut n = 0usize;
    let mut inside = 0usize;
    for (p, &a) in x.iter().zip(alive) {
        if a && p.is_finite() {
            n += 1;
            if BREATHING_ZONE.contains(*p) {
                inside += 1;
            }
        }
    }
    (n > 0).then(|| 100.0 * inside as f64 / n as f64)
}

pub fn frame_bze(f: &Frame) -> Option<f64> {
    bze(&f.position, &f.alive)
}

/// Per-frame metrics of a prediction against its reference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub time: Vec<f64>,
    pub mde: Vec<Option<f64>>,
    pub ke_ratio: Vec<Option<f64>>,
    pub rg_pred: Vec<Option<f64>>,
    pub rg_gt: Vec<Option<f64>>,
    pub rg_err: Vec<Option<f64>>,
    pub bze_pred: Vec<Option<f64>>,
    pub bze_gt: Vec<Option<f64>>,
    /// Jointly alive parcels.
    pub n_alive: Vec<usize>,
    /// Frames without any jointly valid parcel.
    pub masked: Vec<bool>,
}

impl MetricSeries {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("time,mde,ke_ratio,rg_pred,rg_gt,rg_err,bze_pred,bze_gt,n_alive,masked\n");
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                self.time[i],
                cell(self.mde[i]),
                cell(self.ke_ratio[i]),
                cell(self.rg_pred[i]),
                cell(self.rg_gt[i]),
                cell(self.rg_err[i]),
                cell(self.bze_pred[i]),
                cell(self.bze_gt[i]),
                self.n_alive[i],
                self.masked[i] as u8
            );
        }
        s
    }
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "nan".into(),
    }
}

/// Mean over the defined entries.
pub fn time_average(v: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

struct Lookup<'a> {
    frame: &'a Frame,
    index: HashMap<u32, usize>,
}

impl<'a> Lookup<'a> {
    fn new(frame: &'a Frame) -> Self {
        let index = frame.orig_id.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        Self { frame, index }
    }

    fn get(&self, id: u32) -> Option<Vec2> {
        let &k = self.index.get(&id)?;
        let p = self.frame.position[k];
        (self.frame.alive[k] && p.is_finite()).then_some(p)
    }
}

fn find_frame(a: &RolloutArchive, t: f64) -> Option<&Frame> {
    let i = a.frames.partition_point(|f| f.time < t - TIME_TOL);
    a.frames.get(i).filter(|f| (f.time - t).abs() <= TIME_TOL)
}

/// Compare a predicted archive with its reference on the common frame
/// times. Parcels are matched by `orig_id`. Velocities of the first
/// predicted frame fall back to the reference positions one step earlier,
/// which are the priming positions of the prediction.
pub fn metric_series(pred: &RolloutArchive, gt: &RolloutArchive, dt: f64) -> Result<MetricSeries> {
    let mut s = MetricSeries::default();
    for (i, pf) in pred.frames.iter().enumerate() {
        let Some(gf) = find_frame(gt, pf.time) else { continue };
        let gl = Lookup::new(gf);
        let pl = Lookup::new(pf);
        let t_prev = pf.time - dt;
        let pprev = i
            .checked_sub(1)
            .map(|j| &pred.frames[j])
            .filter(|f| (f.time - t_prev).abs() <= TIME_TOL)
            .or_else(|| find_frame(gt, t_prev))
            .map(Lookup::new);
        let gprev = find_frame(gt, t_prev).map(Lookup::new);

        let mut xp = Vec::with_capacity(gf.len());
        let mut xg = Vec::with_capacity(gf.len());
        let mut mask = Vec::with_capacity(gf.len());
        let mut vp = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &id in &gf.orig_id {
            let (g, p) = (gl.get(id), pl.get(id));
            let ok = g.is_some() && p.is_some();
            xg.push(g.unwrap_or(Vec2::ZERO));
            xp.push(p.unwrap_or(Vec2::ZERO));
            mask.push(ok);
            if let (true, Some(pp), Some(gp)) = (ok, &pprev, &gprev) {
                if let (Some(a), Some(b)) = (pp.get(id), gp.get(id)) {
                    vp.0.push(a);
                    vp.1.push(p.unwrap());
                    vp.2.push(b);
                    vp.3.push(g.unwrap());
                    vp.4.push(true);
                }
            }
        }
        let n_alive = mask.iter().filter(|&&m| m).count();
        let (rge, rp, rg) = rg_err(&xp, &xg, &mask);
        s.time.push(pf.time);
        s.mde.push(mde(&xp, &xg, &mask, L_REF));
        s.ke_ratio.push(ke_ratio(&vp.0, &vp.1, &vp.2, &vp.3, &vp.4, dt));
        s.rg_pred.push(rp);
        s.rg_gt.push(rg);
        s.rg_err.push(rge);
        s.bze_pred.push(frame_bze(pf));
        s.bze_gt.push(frame_bze(gf));
        s.n_alive.push(n_alive);
        s.masked.push(n_alive == 0);
    }
    if s.is_empty() {
        return Err(Error::Data("prediction and reference share no frame times".into()));
    }
    Ok(s)
}

/// Scalar summary of a rollout against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mde_mean: Option<f64>,
    pub ke_ratio_mean: Option<f64>,
    pub rg_err_mean: Option<f64>,
    pub peak_bze: Option<f64>,
    pub peak_bze_ref: Option<f64>,
    pub bze_rmse: Option<f64>,
    /// Relative Poisson noise of the parcel count at the predicted peak.
    pub peak_bze_poisson_rel: Option<f64>,
    pub n_frames: usize,
    pub n_masked_frames: usize,
}

fn peak(v: &[Option<f64>]) -> Option<(usize, f64)> {
    v.iter()
        .enumerate()
        .filter_map(|(i, x)| x.map(|x| (i, x)))
        .fold(None, |acc: Option<(usize, f64)>, (i, x)| match acc {
            Some((_, m)) if m >= x => acc,
            _ => Some((i, x)),
        })
}

pub fn summarize(s: &MetricSeries, pred: &RolloutArchive) -> MetricSummary {
    let masked = |v: &[Option<f64>]| -> Vec<Option<f64>> {
        v.iter().zip(&s.masked).map(|(x, &m)| if m { None } else { *x }).collect()
    };
    let sq: Vec<Option<f64>> = s
        .bze_pred
        .iter()
        .zip(&s.bze_gt)
        .map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).powi(2)))
        .collect();
    let pk = peak(&s.bze_pred);
    let poisson = pk.and_then(|(i, b)| {
        let f = find_frame(pred, s.time[i])?;
        let n_bz = b / 100.0 * f.n_alive() as f64;
        (n_bz > 0.0).then(|| 1.0 / n_bz.sqrt())
    });
    MetricSummary {
        mde_mean: time_average(&masked(&s.mde)),
        ke_ratio_mean: time_average(&masked(&s.ke_ratio)),
        rg_err_mean: time_average(&masked(&s.rg_err)),
        peak_bze: pk.map(|p| p.1),
        peak_bze_ref: peak(&s.bze_gt).map(|p| p.1),
        bze_rmse: time_average(&sq).map(f64::sqrt),
        peak_bze_poisson_rel: poisson,
        n_frames: s.len(),
        n_masked_frames: s.masked.iter().filter(|&&m| m).count(),
    }
}

/// Drift-removed mean-squared displacements and the derived coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionResult {
    pub tau: Vec<f64>,
    pub tau_star: Vec<f64>,
    pub msd_l: Vec<f64>,
    pub msd_t: Vec<f64>,
    /// Mean vertical displacement per lag, m.
    pub mean_dy: Vec<f64>,
    pub n_parcels: Vec<usize>,
    pub d_l: f64,
    pub d_t: f64,
    pub d_l_star: f64,
    pub d_t_star: f64,
    pub anisotropy: f64,
    pub v_drift: f64,
    /// Lagrangian time scales `D / sigma_v^2` along x and y, s.
    pub t_l: (f64, f64),
    pub fit_window: (f64, f64),
    pub t_ref: f64,
}

impl DispersionResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,tau_star,msd_l,msd_t,mean_dy,n_parcels\n");
        for i in 0..self.tau.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.tau[i], self.tau_star[i], self.msd_l[i], self.msd_t[i], self.mean_dy[i], self.n_parcels[i]
            );
        }
        s
    }
}

/// Least-squares line through `(x, y)`; returns `(slope, intercept, r2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Some((slope, intercept, r2))
}

/// Log-log slope of an MSD curve over lags in `[lo, hi]`.
pub fn loglog_slope(tau: &[f64], msd: &[f64], lo: f64, hi: f64) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = tau
        .iter()
        .zip(msd)
        .filter(|(t, m)| **t >= lo && **t <= hi && **t > 0.0 && **m > 0.0)
        .map(|(t, m)| (t.ln(), m.ln()))
        .unzip();
    linear_fit(&x, &y).map(|f| f.0)
}

fn window_fit(tau: &[f64], y: &[f64], lo: f64, hi: f64) -> f64 {
    let (x, y): (Vec<f64>, Vec<f64>) = tau
        .iter()
        .zip(y)
        .filter(|(t, v)| **t >= lo && **t <= hi && v.is_finite())
        .map(|(t, v)| (*t, *v))
        .unzip();
    linear_fit(&x, &y).map_or(f64::NAN, |f| f.0)
}

/// Taylor dispersion of the parcels alive at `t_ref`, tracked by identity.
pub fn msd_dispersion_from(archive: &RolloutArchive, v_in: f64, h: f64, t_ref: f64) -> Result<DispersionResult> {
    if !(v_in > 0.0) || !(h > 0.0) {
        return Err(Error::Domain(format!("V_in ({v_in}) and H ({h}) must be positive")));
    }
    let r = archive.frames.partition_point(|f| f.time < t_ref - TIME_TOL);
    let Some(f0) = archive.frames.get(r) else {
        return Err(Error::Data(format!("no frame at or after t_ref = {t_ref}")));
    };
    let l0 = Lookup::new(f0);
    let ids: Vec<(u32, Vec2)> = f0.orig_id.iter().filter_map(|&id| l0.get(id).map(|p| (id, p))).collect();
    if ids.is_empty() {
        return Err(Error::Data("no parcels alive at t_ref".into()));
    }
    let mut out = DispersionResult {
        tau: vec![],
        tau_star: vec![],
        msd_l: vec![],
        msd_t: vec![],
        mean_dy: vec![],
        n_parcels: vec![],
        d_l: f64::NAN,
        d_t: f64::NAN,
        d_l_star: f64::NAN,
        d_t_star: f64::NAN,
        anisotropy: f64::NAN,
        v_drift: f64::NAN,
        t_l: (f64::NAN, f64::NAN),
        fit_window: (0.0, 0.0),
        t_ref: f0.time,
    };
    for f in &archive.frames[r..] {
        let l = Lookup::new(f);
        let d: Vec<Vec2> = ids.iter().filter_map(|&(id, p0)| l.get(id).map(|p| p - p0)).collect();
        if d.is_empty() {
            break;
        }
        let n = d.len() as f64;
        let m = d.iter().fold(Vec2::ZERO, |a, &v| a + v) / n;
        let tau = f.time - f0.time;
        out.tau.push(tau);
        out.tau_star.push(tau * v_in / h);
        out.msd_l.push(d.iter().map(|v| (v.x - m.x).powi(2)).sum::<f64>() / n);
        out.msd_t.push(d.iter().map(|v| (v.y - m.y).powi(2)).sum::<f64>() / n);
        out.mean_dy.push(m.y);
        out.n_parcels.push(d.len());
    }
    let tau_max = *out.tau.last().unwrap();
    let (lo, hi) = (FIT_WINDOW.0 * tau_max, FIT_WINDOW.1 * tau_max);
    out.fit_window = (lo, hi);
    out.d_l = window_fit(&out.tau, &out.msd_l, lo, hi) / 2.0;
    out.d_t = window_fit(&out.tau, &out.msd_t, lo, hi) / 2.0;
    out.d_l_star = out.d_l / (v_in * h);
    out.d_t_star = out.d_t / (v_in * h);
    out.anisotropy = out.d_l / out.d_t;
    out.v_drift = window_fit(&out.tau, &out.mean_dy, 0.0, tau_max).abs();
    if out.tau.len() > 1 {
        let t1 = out.tau[1];
        let sl = out.msd_l[1] / (t1 * t1);
        let st = out.msd_t[1] / (t1 * t1);
        out.t_l = (out.d_l / sl, out.d_t / st);
    }
    Ok(out)
}

pub fn msd_dispersion(archive: &RolloutArchive, v_in: f64, h: f64) -> Result<DispersionResult> {
    msd_dispersion_from(archive, v_in, h, T_START)
}

/// Power law `peak BZE ~ ACH^slope`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub slope: f64,
    pub prefactor: f64,
    pub r2: f64,
    pub n: usize,
}

pub fn ach_bze_fit(peak_bze: &[f64], ach: &[f64]) -> Result<PowerFit> {
    if peak_bze.len() != ach.len() {
        return Err(Error::Shape(format!("{} BZE values for {} ACH values", peak_bze.len(), ach.len())));
    }
    if peak_bze.iter().chain(ach).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain("power-law fit needs positive finite values".into()));
    }
    let x: Vec<f64> = ach.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = peak_bze.iter().map(|v| v.ln()).collect();
    let (slope, b, r2) = linear_fit(&x, &y)
        .ok_or_else(|| Error::Data("power-law fit needs at least two distinct ACH values".into()))?;
    Ok(PowerFit {
        slope,
        prefactor: b.exp(),
        r2,
        n: x.len(),
    })
}

/// Everything `eval` writes for one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pred_variant: String,
    pub ref_variant: String,
    pub v_in: f64,
    pub summary: MetricSummary,
    pub series: MetricSeries,
    pub dispersion_pred: Option<DispersionResult>,
    pub dispersion_ref: Option<DispersionResult>,
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    pred_variant: &'a str,
    ref_variant: &'a str,
    v_in: f64,
    #[serde(flatten)]
    summary: &'a MetricSummary,
    dispersion_pred: Option<DispersionSummary>,
    dispersion_ref: Option<DispersionSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionSummary {
    pub d_l: f64,
    pub d_t: f64,
    pub d_l_star: f64,
    pub d_t_star: f64,
    pub anisotropy: f64,
    pub v_drift: f64,
}

impl From<&DispersionResult> for DispersionSummary {
    fn from(d: &DispersionResult) -> Self {
        Self {
            d_l: d.d_l,
            d_t: d.d_t,
            d_l_star: d.d_l_star,
            d_t_star: d.d_t_star,
            anisotropy: d.anisotropy,
            v_drift: d.v_drift,
        }
    }
}

impl EvalReport {
    pub fn build(pred: &RolloutArchive, gt: &RolloutArchive) -> Result<Self> {
        let series = metric_series(pred, gt, DT)?;
        let summary = summarize(&series, pred);
        let v_in = gt.meta.v_in;
        let disp = |a: &RolloutArchive| match msd_dispersion(a, v_in, ROOM_HEIGHT) {
            Ok(d) => Some(d),
            Err(e) => {
                log::warn!("dispersion skipped for {}: {e}", a.meta.variant);
                None
            }
        };
        Ok(Self {
            pred_variant: pred.meta.variant.clone(),
            ref_variant: gt.meta.variant.clone(),
            v_in,
            summary,
            dispersion_pred: disp(pred),
            dispersion_ref: disp(gt),
            series,
        })
    }

    pub fn metrics_json(&self) -> Result<String> {
        let m = MetricsJson {
            pred_variant: &self.pred_variant,
            ref_variant: &self.ref_variant,
            v_in: self.v_in,
            summary: &self.summary,
            dispersion_pred: self.dispersion_pred.as_ref().map(Into::into),
            dispersion_ref: self.dispersion_ref.as_ref().map(Into::into),
        };
        Ok(serde_json::to_string_pretty(&m)?)
    }

    /// Dispersion curves of prediction and reference side by side on the
    /// reference lags.
    pub fn dispersion_csv(&self) -> String {
        let mut s = String::from("tau,tau_star,msd_l_pred,msd_t_pred,msd_l_ref,msd_t_ref\n");
        let Some(r) = &self.dispersion_ref else { return s };
        for i in 0..r.tau.len() {
            let (pl, pt) = match &self.dispersion_pred {
                Some(p) => {
                    let k = p.tau.iter().position(|t| (t - r.tau[i]).abs() <= TIME_TOL);
                    (k.map(|k| p.msd_l[k]), k.map(|k| p.msd_t[k]))
                }
                None => (None, None),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.tau[i],
                r.tau_star[i],
                cell(pl),
                cell(pt),
                r.msd_l[i],
                r.msd_t[i]
            );
        }
        s
    }

    /// Writes metrics.json, timeseries.csv and dispersion.csv.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        put("metrics.json", self.metrics_json()?)?;
        put("timeseries.csv", self.series.to_csv())?;
        put("dispersion.csv", self.dispersion_csv())
    }
}

/// One case of a multi-archive analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseAnalysis {
    pub name: String,
    pub variant: String,
    pub seed: u64,
    pub v_in: f64,
    pub u_mag: f64,
    pub theta: f64,
    pub d_bar: f64,
    pub groups: NonDimGroups,
    pub peak_bze: Option<f64>,
    pub dispersion: Option<DispersionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub cases: Vec<CaseAnalysis>,
    pub ach_fit: Option<PowerFit>,
}

pub fn analyze_case(name: &str, a: &RolloutArchive) -> Result<CaseAnalysis> {
    let f0 = a.frames.first().ok_or_else(|| Error::Data(format!("{name}: archive has no frames")))?;
    let ds: Vec<f64> = (0..f0.len()).filter(|&i| f0.alive[i]).map(|i| f0.diameter[i]).collect();
    if ds.is_empty() {
        return Err(Error::Data(format!("{name}: no alive parcels in the first frame")));
    }
    let d_bar = ds.iter().sum::<f64>() / ds.len() as f64;
    let groups = physics::nondim_groups(
        a.meta.v_in,
        a.meta.u_mag,
        d_bar,
        &RoomGeometry::default(),
        &AirProperties::default(),
        &DropletProperties::default(),
    );
    let bz: Vec<Option<f64>> = a.frames.iter().map(frame_bze).collect();
    Ok(CaseAnalysis {
        name: name.to_string(),
        variant: a.meta.variant.clone(),
        seed: a.meta.seed,
        v_in: a.meta.v_in,
        u_mag: a.meta.u_mag,
        theta: a.meta.theta,
        d_bar,
        groups,
        peak_bze: peak(&bz).map(|p| p.1),
        dispersion: msd_dispersion(a, a.meta.v_in, ROOM_HEIGHT).ok().as_ref().map(Into::into),
    })
}

/// Non-dimensional groups, dispersion and the ACH power law over a set of
/// named archives. Cases without breathing-zone exposure are left out of
/// the fit.
pub fn analyze(archives: &[(String, RolloutArchive)]) -> Result<Analysis> {
    let cases = archives
        .iter()
        .map(|(n, a)| analyze_case(n, a))
        .collect::<Result<Vec<_>>>()?;
    let (b, ach): (Vec<f64>, Vec<f64>) = cases
        .iter()
        .filter_map(|c| c.peak_bze.filter(|&b| b > 0.0).map(|b| (b, c.groups.ach)))
        .unzip();
    let ach_fit = match ach_bze_fit(&b, &ach) {
        Ok(f) => Some(f),
        Err(e) => {
            log::info!("no ACH fit: {e}");
            None
        }
    };
    Ok(Analysis { cases, ach_fit })
}

impl Analysis {
    pub fn nondim_csv(&self) -> String {
        let mut s = String::from("case,variant,seed,v_in,u_mag,theta,d_bar,st,s_v,ach,re_jet,pe_t,k0,omega0,d_turb\n");
        for c in &self.cases {
            let g = &c.groups;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                c.name, c.variant, c.seed, c.v_in, c.u_mag, c.theta, c.d_bar, g.st, g.s_v, g.ach, g.re_jet, g.pe_t, g.k0,
                g.omega0, g.d_turb
            );
        }
        s
    }

    pub fn dispersion_csv(&self) -> String {
        let mut s = String::from("case,d_l,d_t,d_l_star,d_t_star,anisotropy,v_drift\n");
        for c in &self.cases {
            match &c.dispersion {
                Some(d) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{}",
                        c.name, d.d_l, d.d_t, d.d_l_star, d.d_t_star, d.anisotropy, d.v_drift
                    );
                }
                None => {
                    let _ = writeln!(s, "{},nan,nan,nan,nan,nan,nan", c.name);
                }
            }
        }
        s
    }

    pub fn ach_fit_csv(&self) -> String {
        let mut s = String::from("case,ach,peak_bze\n");
        for c in &self.cases {
            let _ = writeln!(s, "{},{},{}", c.name, c.groups.ach, cell(c.peak_bze));
        }
        match &self.ach_fit {
            Some(f) => {
                let _ = writeln!(s, "# slope,{},prefactor,{},r2,{},n,{}", f.slope, f.prefactor, f.r2, f.n);
            }
            None => s.push_str("# slope,nan\n"),
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("nondim.csv", self.nondim_csv()),
            ("dispersion.csv", self.dispersion_csv()),
            ("ach_fit.csv", self.ach_fit_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}
