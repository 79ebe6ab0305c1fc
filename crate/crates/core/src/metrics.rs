//! Dice, HD95 and BraTS-style region evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{HrstError, Result};
use crate::volume_io::LabelVolume;

/// Boolean volume `[D, H, W]` with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<bool>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(HrstError::Dimension(format!(
                "mask dims {dims:?} must be >= 1"
            )));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(HrstError::Shape(format!(
                "mask {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(HrstError::InvalidValue(format!(
                "spacing {spacing:?} must be > 0"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    /// Voxels whose label is in `ids`.
    pub fn from_labels(labels: &LabelVolume, ids: &[u32]) -> Self {
        Self {
            dims: labels.dims(),
            spacing: labels.spacing(),
            data: labels.data().iter().map(|v| ids.contains(v)).collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    fn at(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    /// Foreground voxels with a 6-neighbour that is background or outside the volume.
    pub fn boundary(&self) -> Vec<[usize; 3]> {
        let [d, h, w] = self.dims;
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !self.at(z, y, x) {
                        continue;
                    }
                    let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                    if edge
                        || !self.at(z - 1, y, x)
                        || !self.at(z + 1, y, x)
                        || !self.at(z, y - 1, x)
                        || !self.at(z, y + 1, x)
                        || !self.at(z, y, x - 1)
                        || !self.at(z, y, x + 1)
                    {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }

    /// Length of the volume diagonal in mm; the HD95 value when exactly one mask is empty.
    pub fn diagonal(&self) -> f64 {
        (0..3)
            .map(|a| (self.dims[a] as f64 * self.spacing[a] as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims != b.dims {
        return Err(HrstError::Shape(format!(
            "mask dims {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    if a.spacing != b.spacing {
        return Err(HrstError::Shape(format!(
            "mask spacing {:?} vs {:?}",
            a.spacing, b.spacing
        )));
    }
    Ok(())
}

/// `2|a∩b| / (|a| + |b|)`; two empty masks score 1.
pub fn dice_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims != b.dims {
        return Err(HrstError::Shape(format!(
            "mask dims {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Lower envelope of parabolas `f(q) + (w (p − q))²` along one line.
fn edt_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let w2 = w * w;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64))
                / (2.0 * w2 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while z[k + 1] < p as f64 {
            k += 1;
        }
        let d = (p as f64 - v[k] as f64) * w;
        *o = d * d + f[v[k]];
    }
}

/// Squared spacing-weighted distance from every voxel to the nearest voxel in `sites`.
fn squared_edt(dims: [usize; 3], spacing: [f32; 3], sites: &[[usize; 3]]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g = vec![f64::INFINITY; d * h * w];
    for s in sites {
        g[(s[0] * h + s[1]) * w + s[2]] = 0.0;
    }
    let n = d.max(h).max(w);
    let (mut line, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let strides = [h * w, w, 1];
    for axis in [2usize, 1, 0] {
        let len = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for p in 0..len {
                    line[p] = g[base + p * stride];
                }
                edt_1d(
                    &line[..len],
                    spacing[axis] as f64,
                    &mut out[..len],
                    &mut v,
                    &mut z,
                );
                for p in 0..len {
                    g[base + p * stride] = out[p];
                }
            }
        }
    }
    g
}

/// Percentile with linear interpolation between order statistics, as numpy computes it.
pub fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    let (a, b) = (sorted[lo], sorted[hi]);
    let diff = b - a;
    if t >= 0.5 {
        b - diff * (1.0 - t)
    } else {
        a + diff * t
    }
}

/// Directed boundary-to-boundary nearest distances from `a` to `b`, then `b` to `a`.
pub fn surface_distances(a: &BinaryMask, b: &BinaryMask) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let (ba, bb) = (a.boundary(), b.boundary());
    let [_, h, w] = a.dims;
    let mut out = Vec::with_capacity(ba.len() + bb.len());
    let ta = squared_edt(a.dims, a.spacing, &bb);
    out.extend(ba.iter().map(|p| ta[(p[0] * h + p[1]) * w + p[2]].sqrt()));
    let tb = squared_edt(a.dims, a.spacing, &ba);
    out.extend(bb.iter().map(|p| tb[(p[0] * h + p[1]) * w + p[2]].sqrt()));
    Ok(out)
}

/// 95th percentile of the pooled directed surface distances (mm). Two empty masks give 0, one
/// empty mask gives the volume diagonal.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(a.diagonal()),
        _ => {}
    }
    let mut d = surface_distances(a, b)?;
    d.sort_by(f64::total_cmp);
    Ok(percentile_linear(&d, 95.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub name: String,
    pub labels: Vec<u32>,
}

/// Named evaluation regions, each a union of raw label ids. Label 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub regions: Vec<Region>,
}

impl RegionSpec {
    /// Whole tumour, enhancing tumour and tumour core from the three tumour label ids.
    pub fn brats(ncr: u32, ed: u32, et: u32) -> Self {
        let r = |n: &str, l: &[u32]| Region {
            name: n.into(),
            labels: l.to_vec(),
        };
        Self {
            regions: vec![r("WT", &[ncr, ed, et]), r("ET", &[et]), r("TC", &[ncr, et])],
        }
    }

    /// One region per foreground class `1..classes`.
    pub fn per_class(classes: usize) -> Self {
        Self {
            regions: (1..classes as u32)
                .map(|c| Region {
                    name: format!("class{c}"),
                    labels: vec![c],
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(HrstError::Config("region spec has no regions".into()));
        }
        for r in &self.regions {
            if r.labels.is_empty() {
                return Err(HrstError::Config(format!(
                    "region {} has no labels",
                    r.name
                )));
            }
        }
        Ok(())
    }

    fn known(&self, id: u32) -> bool {
        id == 0 || self.regions.iter().any(|r| r.labels.contains(&id))
    }
}

impl Default for RegionSpec {
    fn default() -> Self {
        Self::brats(1, 2, 3)
    }
}

pub fn brats_regions(labels: &LabelVolume, spec: &RegionSpec) -> Result<Vec<(String, BinaryMask)>> {
    spec.validate()?;
    if let Some(&bad) = labels.data().iter().find(|&&v| !spec.known(v)) {
        return Err(HrstError::Mapping(format!(
            "label id {bad} is neither background nor part of any region"
        )));
    }
    Ok(spec
        .regions
        .iter()
        .map(|r| (r.name.clone(), BinaryMask::from_labels(labels, &r.labels)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub name: String,
    pub dice: f64,
    pub hd95: f64,
    /// `hd95` is the empty-mask sentinel rather than a measured distance.
    pub hd95_sentinel: bool,
}

/// Per-region scores with their averages. `mean_hd95` skips sentinel entries and is `None`
/// when every entry is a sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: String,
    pub regions: Vec<RegionScore>,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
    pub conventions: Conventions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub both_empty_dice: f64,
    pub both_empty_hd95: f64,
    pub one_empty_hd95: String,
    pub mean_hd95: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            both_empty_dice: 1.0,
            both_empty_hd95: 0.0,
            one_empty_hd95: "volume diagonal (mm)".into(),
            mean_hd95: "mean over non-sentinel regions".into(),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "nan".into())
}

impl CaseReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("case,avg_hd95,avg_dsc");
        for r in &self.regions {
            h.push_str(&format!(",{0}_hd95,{0}_dsc", r.name));
        }
        h
    }

    /// Average then per-region, HD95 before DSC within each group.
    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{}",
            self.case,
            fmt_opt(self.mean_hd95),
            self.mean_dice
        );
        for r in &self.regions {
            s.push_str(&format!(",{},{}", r.hd95, r.dice));
        }
        s
    }
}

pub fn evaluate_case(
    case: &str,
    pred: &LabelVolume,
    gt: &LabelVolume,
    spec: &RegionSpec,
) -> Result<CaseReport> {
    if pred.dims() != gt.dims() {
        return Err(HrstError::Shape(format!(
            "prediction {:?} vs reference {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let p = brats_regions(pred, spec)?;
    let g = brats_regions(gt, spec)?;
    let mut regions = Vec::with_capacity(p.len());
    for ((name, pm), (_, gm)) in p.iter().zip(&g) {
        let mut gm = gm.clone();
        gm.spacing = pm.spacing;
        regions.push(RegionScore {
            name: name.clone(),
            dice: dice_score(pm, &gm)?,
            hd95: hd95(pm, &gm)?,
            hd95_sentinel: pm.is_empty() != gm.is_empty(),
        });
    }
    let mean_dice = regions.iter().map(|r| r.dice).sum::<f64>() / regions.len() as f64;
    let defined: Vec<f64> = regions
        .iter()
        .filter(|r| !r.hd95_sentinel)
        .map(|r| r.hd95)
        .collect();
    let mean_hd95 =
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(CaseReport {
        case: case.to_string(),
        regions,
        mean_dice,
        mean_hd95,
        conventions: Conventions::default(),
    })
}

/// Column means over case rows (cases whose average HD95 is undefined are skipped for it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub cases: usize,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
    pub regions: Vec<RegionScore>,
}

impl CohortSummary {
    pub fn from_cases(cases: &[CaseReport]) -> Result<Self> {
        let first = cases
            .first()
            .ok_or_else(|| HrstError::Config("no cases to summarise".into()))?;
        let n = cases.len() as f64;
        let mean = |f: &dyn Fn(&CaseReport) -> f64| cases.iter().map(f).sum::<f64>() / n;
        let hd: Vec<f64> = cases.iter().filter_map(|c| c.mean_hd95).collect();
        let regions = (0..first.regions.len())
            .map(|i| RegionScore {
                name: first.regions[i].name.clone(),
                dice: mean(&|c| c.regions[i].dice),
                hd95: mean(&|c| c.regions[i].hd95),
                hd95_sentinel: cases.iter().any(|c| c.regions[i].hd95_sentinel),
            })
            .collect();
        Ok(Self {
            cases: cases.len(),
            mean_dice: mean(&|c| c.mean_dice),
            mean_hd95: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
            regions,
        })
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("mean,{},{}", fmt_opt(self.mean_hd95), self.mean_dice);
        for r in &self.regions {
            s.push_str(&format!(",{},{}", r.hd95, r.dice));
        }
        s
    }
}

/// Mean Dice over the foreground classes `1..classes`.
pub fn mean_foreground_dice(pred: &LabelVolume, gt: &LabelVolume, classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(HrstError::Config(
            "need at least one foreground class".into(),
        ));
    }
    let mut sum = 0.0;
    for c in 1..classes as u32 {
        sum += dice_score(
            &BinaryMask::from_labels(pred, &[c]),
            &BinaryMask::from_labels(gt, &[c]),
        )?;
    }
    Ok(sum / (classes - 1) as f64)
}
