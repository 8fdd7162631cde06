//! Fidelity metrics and the cross-degradation evaluation protocols.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneHandle;
use crate::degradations::{DegradationKind, Pair};
use crate::error::{Error, Result};
use crate::inference::{restore, Tiling};
use crate::model::ReprogramModel;
use crate::tensor::ImageTensor;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricSpace {
    #[default]
    Rgb,
    /// Luma (BT.601) only.
    Y,
}

fn luma(t: &ImageTensor) -> Vec<f64> {
    let (r, g, b) = (t.plane(0), t.plane(1), t.plane(2));
    (0..t.plane_len())
        .map(|i| {
            (16.0 + 65.481 * r[i] as f64 + 128.553 * g[i] as f64 + 24.966 * b[i] as f64) / 255.0
        })
        .collect()
}

fn planes(t: &ImageTensor, space: MetricSpace) -> Vec<Vec<f64>> {
    match space {
        MetricSpace::Rgb => (0..t.channels())
            .map(|c| t.plane(c).iter().map(|&v| v as f64).collect())
            .collect(),
        MetricSpace::Y => vec![luma(t)],
    }
}

pub fn psnr(pred: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    psnr_in(pred, target, MetricSpace::Rgb)
}

/// `10 log10(1 / MSE)` for data in `[0, 1]`; identical inputs give [`PSNR_CAP`].
pub fn psnr_in(pred: &ImageTensor, target: &ImageTensor, space: MetricSpace) -> Result<f64> {
    pred.ensure_shape(target, "psnr")?;
    if space == MetricSpace::Y {
        pred.ensure_channels(3, "psnr")?;
    }
    let (a, b) = (planes(pred, space), planes(target, space));
    let mut se = 0.0;
    let mut n = 0usize;
    for (pa, pb) in a.iter().zip(&b) {
        for (x, y) in pa.iter().zip(pb) {
            se += (x - y) * (x - y);
        }
        n += pa.len();
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let e_aa = filter_valid(&prod(a, a), h, w, &g);
    let e_bb = filter_valid(&prod(b, b), h, w, &g);
    let e_ab = filter_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

pub fn ssim(pred: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    ssim_in(pred, target, MetricSpace::Rgb)
}

/// Mean local SSIM over valid 11x11 Gaussian windows, averaged over channels.
pub fn ssim_in(pred: &ImageTensor, target: &ImageTensor, space: MetricSpace) -> Result<f64> {
    pred.ensure_shape(target, "ssim")?;
    let (_, h, w) = pred.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    if pred == target {
        return Ok(1.0);
    }
    let (a, b) = (planes(pred, space), planes(target, space));
    let s: f64 = a
        .iter()
        .zip(&b)
        .map(|(pa, pb)| ssim_plane(pa, pb, h, w))
        .sum();
    Ok(s / a.len() as f64)
}

/// Anything that maps a degraded image to a restored one.
pub trait Restorer {
    fn restore(&self, image: &ImageTensor) -> Result<ImageTensor>;
}

pub struct ModelRestorer<'a> {
    pub model: &'a ReprogramModel<f32>,
    pub tiling: Tiling,
}

impl Restorer for ModelRestorer<'_> {
    fn restore(&self, image: &ImageTensor) -> Result<ImageTensor> {
        restore(self.model, image, self.tiling)
    }
}

/// The backbone on its own, applied to the whole image.
pub struct BackboneRestorer<'a>(pub &'a BackboneHandle<f32>);

impl Restorer for BackboneRestorer<'_> {
    fn restore(&self, image: &ImageTensor) -> Result<ImageTensor> {
        Ok(self.0.forward(image)?.clamp01())
    }
}

/// Returns the degraded input unchanged.
pub struct Identity;

impl Restorer for Identity {
    fn restore(&self, image: &ImageTensor) -> Result<ImageTensor> {
        Ok(image.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// Train on one kind, test on all five.
    One,
    /// Train on two kinds combined, test on all five.
    Two,
}

impl Protocol {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Protocol::One),
            2 => Ok(Protocol::Two),
            _ => Err(Error::Config(format!("protocol must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Protocol::One => 1,
            Protocol::Two => 2,
        }
    }

    pub fn validate_kinds(self, kinds: &[DegradationKind]) -> Result<()> {
        let want = self.number() as usize;
        let mut distinct = kinds.to_vec();
        distinct.sort();
        distinct.dedup();
        if kinds.len() != want || distinct.len() != want {
            return Err(Error::Validation(vec![format!(
                "protocol {} needs exactly {want} distinct training kind(s), got [{}]",
                self.number(),
                kinds
                    .iter()
                    .map(|k| k.name())
                    .collect::<Vec<_>>()
                    .join(", ")
            )]));
        }
        Ok(())
    }
}

/// All ten two-kind combinations, in table order.
pub fn kind_pairs() -> Vec<[DegradationKind; 2]> {
    let k = DegradationKind::ALL;
    let mut v = Vec::new();
    for i in 0..k.len() {
        for j in i + 1..k.len() {
            v.push([k[i], k[j]]);
        }
    }
    v
}

pub fn row_label(kinds: &[DegradationKind]) -> String {
    let mut k = kinds.to_vec();
    k.sort();
    k.iter().map(|k| k.label()).collect::<Vec<_>>().join("&")
}

/// Test pairs grouped by kind.
pub type TestSets = BTreeMap<DegradationKind, Vec<Pair>>;

pub fn group_pairs(pairs: Vec<Pair>) -> TestSets {
    let mut out = TestSets::new();
    for p in pairs {
        out.entry(p.kind).or_default().push(p);
    }
    out
}

/// SHA-256 of the pixel data of every pair of each kind.
pub fn dataset_hashes(tests: &TestSets) -> BTreeMap<String, String> {
    tests
        .iter()
        .map(|(k, pairs)| {
            let mut h = Sha256::new();
            for p in pairs {
                for t in [&p.degraded, &p.clean] {
                    let (c, y, x) = t.shape();
                    for d in [c, y, x] {
                        h.update((d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        h.update(v.to_le_bytes());
                    }
                }
            }
            (k.name().to_string(), hex::encode(h.finalize()))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub row: String,
    pub kind: DegradationKind,
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub train_kinds: Vec<DegradationKind>,
    /// One cell per test kind, in table column order.
    pub cells: Vec<(DegradationKind, Cell)>,
    pub avg: Cell,
    pub checkpoint: Option<String>,
    #[serde(skip)]
    pub images: Vec<ImageRecord>,
}

impl EvalRow {
    pub fn cell(&self, kind: DegradationKind) -> Option<Cell> {
        self.cells.iter().find(|(k, _)| *k == kind).map(|(_, c)| *c)
    }

    pub fn recomputed_avg(&self) -> Cell {
        let n = self.cells.len() as f64;
        Cell {
            psnr: self.cells.iter().map(|(_, c)| c.psnr).sum::<f64>() / n,
            ssim: self.cells.iter().map(|(_, c)| c.ssim).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub protocol: u8,
    pub metric_space: MetricSpace,
    pub dataset_hashes: BTreeMap<String, String>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub rows: Vec<EvalRow>,
}

/// Evaluates one trained restorer on every test kind and fills its row.
pub fn run_protocol(
    protocol: Protocol,
    train_kinds: &[DegradationKind],
    restorer: &dyn Restorer,
    tests: &TestSets,
    space: MetricSpace,
) -> Result<EvalRow> {
    protocol.validate_kinds(train_kinds)?;
    let missing: Vec<String> = DegradationKind::ALL
        .iter()
        .filter(|k| tests.get(k).map_or(true, |v| v.is_empty()))
        .map(|k| format!("no test pairs for kind {k}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(missing));
    }
    let label = row_label(train_kinds);
    let mut cells = Vec::with_capacity(5);
    let mut images = Vec::new();
    for kind in DegradationKind::ALL {
        let pairs = &tests[&kind];
        let mut sum = Cell::default();
        for (index, p) in pairs.iter().enumerate() {
            let out = restorer.restore(&p.degraded)?;
            let c = Cell {
                psnr: psnr_in(&out, &p.clean, space)?,
                ssim: ssim_in(&out, &p.clean, space)?,
            };
            sum.psnr += c.psnr;
            sum.ssim += c.ssim;
            images.push(ImageRecord {
                row: label.clone(),
                kind,
                index,
                psnr: c.psnr,
                ssim: c.ssim,
            });
        }
        let n = pairs.len() as f64;
        cells.push((
            kind,
            Cell {
                psnr: sum.psnr / n,
                ssim: sum.ssim / n,
            },
        ));
    }
    let mut row = EvalRow {
        label,
        train_kinds: train_kinds.to_vec(),
        cells,
        avg: Cell::default(),
        checkpoint: None,
        images,
    };
    row.avg = row.recomputed_avg();
    Ok(row)
}

impl EvalReport {
    pub fn new(
        protocol: Protocol,
        space: MetricSpace,
        tests: &TestSets,
        mut rows: Vec<EvalRow>,
    ) -> Self {
        rows.sort_by(|a, b| a.label.cmp(&b.label));
        EvalReport {
            meta: ReportMeta {
                protocol: protocol.number(),
                metric_space: space,
                dataset_hashes: dataset_hashes(tests),
                timestamp: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            },
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("train");
        for k in DegradationKind::ALL {
            write!(s, ",{0}_psnr,{0}_ssim", k.label()).expect("string");
        }
        s.push_str(",Avg_psnr,Avg_ssim,checkpoint\n");
        for r in &self.rows {
            s.push_str(&r.label);
            for (_, c) in &r.cells {
                write!(s, ",{},{}", c.psnr, c.ssim).expect("string");
            }
            writeln!(
                s,
                ",{},{},{}",
                r.avg.psnr,
                r.avg.ssim,
                r.checkpoint.as_deref().unwrap_or("")
            )
            .expect("string");
        }
        s
    }

    /// Aligned table, PSNR over SSIM per cell.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut s = format!("{:<width$}", "Train");
        for k in DegradationKind::ALL {
            write!(s, " {:>14}", k.label()).expect("string");
        }
        writeln!(s, " {:>14}", "Avg").expect("string");
        for r in &self.rows {
            write!(s, "{:<width$}", r.label).expect("string");
            for (_, c) in r
                .cells
                .iter()
                .chain(std::iter::once(&(DegradationKind::Lr, r.avg)))
            {
                write!(s, " {:>14}", format!("{:.2}/{:.4}", c.psnr, c.ssim)).expect("string");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            for rec in &r.images {
                s.push_str(&serde_json::to_string(rec).expect("record serializes"));
                s.push('\n');
            }
        }
        s
    }
}
