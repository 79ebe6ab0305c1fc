use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{HrstError, Result};
use crate::tape::Fault;
use crate::topology::{Hrstnet, ModelConfig, ParamFamily};
use crate::volume_io::{generate_synthetic, SyntheticSpec};

/// Settings for [`finite_difference_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub tolerance: f64,
    /// Total sampled scalars, spread evenly over the parameter families.
    pub samples: usize,
    pub step: f64,
    /// Gradients with both magnitudes below this compare as equal.
    pub abs_floor: f64,
    /// Spatial input extent; `None` uses the smallest valid cube.
    pub input: Option<[usize; 3]>,
    /// Std of Gaussian noise added to every parameter before checking, so zero biases and
    /// unit gains do not sit at a special point.
    pub jitter: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            seed: 0,
            tolerance: 1e-3,
            samples: 216,
            step: 1e-3,
            abs_floor: 1e-8,
            input: None,
            jitter: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub family: ParamFamily,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FamilySummary {
    pub checked: usize,
    /// Draws rejected because a ±step move flipped the sign of a leaky-ReLU input.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub input: [usize; 3],
    pub loss: f64,
    pub entries: Vec<GradEntry>,
    pub families: BTreeMap<ParamFamily, FamilySummary>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failed_families(&self) -> Vec<ParamFamily> {
        self.families
            .iter()
            .filter(|(_, s)| !s.passed)
            .map(|(f, _)| *f)
            .collect()
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "gradcheck on {:?}: {} parameters, max rel err {:.3e} (tolerance {:.0e}) -> {}\n",
            self.input,
            self.entries.len(),
            self.max_rel_err,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        );
        for (f, r) in &self.families {
            s.push_str(&format!(
                "  {:<11} {:>4} checked {:>3} skipped at kinks  max rel err {:.3e}  {}\n",
                f.as_str(),
                r.checked,
                r.skipped_kinks,
                r.max_rel_err,
                if r.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

pub(crate) fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < floor {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Splits `total` draws over groups as evenly as their sizes allow.
fn spread(total: usize, sizes: &[usize]) -> Vec<usize> {
    let mut q = vec![0; sizes.len()];
    let mut left = total;
    loop {
        let open: Vec<usize> = (0..sizes.len()).filter(|&i| q[i] < sizes[i]).collect();
        if left == 0 || open.is_empty() {
            return q;
        }
        let share = left.div_ceil(open.len());
        for i in open {
            let add = share.min(sizes[i] - q[i]).min(left);
            q[i] += add;
            left -= add;
        }
    }
}

/// Compares reverse-mode gradients of the combined loss with central differences on a
/// stratified random subset of parameters. Draws whose central difference straddles a
/// leaky-ReLU kink are rejected and replaced, since the loss is not differentiable there.
pub fn finite_difference_check(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    run(cfg, None)
}

#[doc(hidden)]
pub fn finite_difference_check_with_fault(
    cfg: &GradcheckConfig,
    fault: Fault,
) -> Result<GradcheckReport> {
    run(cfg, Some(fault))
}

fn run(cfg: &GradcheckConfig, fault: Option<Fault>) -> Result<GradcheckReport> {
    cfg.model.validate()?;
    let input = cfg.input.unwrap_or([cfg.model.min_multiple(); 3]);
    cfg.model.check_input_dims(input)?;
    let sample = generate_synthetic(&SyntheticSpec {
        seed: cfg.seed,
        dims: input,
        channels: cfg.model.in_channels,
        num_classes: cfg.model.num_classes,
        blobs_per_class: 1,
        radius: [
            1.0,
            (input.iter().min().copied().unwrap_or(2) as f32 / 3.0).max(1.0),
        ],
        noise_std: 0.3,
        background: 0.0,
    })?;
    let mut net = Hrstnet::new(cfg.model.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a69_7474);
    let noise = Normal::new(0.0, cfg.jitter)
        .map_err(|e| HrstError::Config(format!("gradcheck jitter: {e}")))?;
    for t in net.params_mut().tensors_mut() {
        for v in &mut t.data {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    let base = net.loss_and_grad_with(&sample.image, &sample.labels, fault)?;

    let (_, base_kinks) = net.loss_with_kinks(&sample.image, &sample.labels)?;

    let mut by_family: BTreeMap<ParamFamily, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, t) in net.params().tensors().iter().enumerate() {
        by_family
            .entry(ParamFamily::of(&t.name))
            .or_default()
            .push((i, t.numel()));
    }
    let sizes: Vec<usize> = by_family
        .values()
        .map(|ts| ts.iter().map(|t| t.1).sum())
        .collect();
    let quotas = spread(cfg.samples, &sizes);

    rng.set_stream(1);
    let mut entries = Vec::with_capacity(cfg.samples);
    let mut skipped = BTreeMap::new();
    for ((&family, tensors), (&size, &quota)) in by_family.iter().zip(sizes.iter().zip(&quotas)) {
        let mut tried = HashSet::new();
        let mut done = 0;
        while done < quota && tried.len() < size {
            let mut k = rng.random_range(0..size);
            if !tried.insert(k) {
                continue;
            }
            let (mut i, mut j) = (0, 0);
            for &(t, n) in tensors {
                if k < n {
                    (i, j) = (t, k);
                    break;
                }
                k -= n;
            }
            let orig = net.params().tensors()[i].data[j];
            let plus = (orig as f64 + cfg.step) as f32;
            let minus = (orig as f64 - cfg.step) as f32;
            net.params_mut().tensors_mut()[i].data[j] = plus;
            let (lp, kp) = net.loss_with_kinks(&sample.image, &sample.labels)?;
            net.params_mut().tensors_mut()[i].data[j] = minus;
            let (lm, km) = net.loss_with_kinks(&sample.image, &sample.labels)?;
            net.params_mut().tensors_mut()[i].data[j] = orig;
            if kp != base_kinks || km != base_kinks {
                *skipped.entry(family).or_insert(0) += 1;
                continue;
            }
            let numeric = (lp.total - lm.total) / (plus as f64 - minus as f64);
            let analytic = base.grads[i][j];
            entries.push(GradEntry {
                name: net.params().tensors()[i].name.clone(),
                index: j,
                family,
                analytic,
                numeric,
                rel_err: rel_err(analytic, numeric, cfg.abs_floor),
            });
            done += 1;
        }
    }

    let mut families = BTreeMap::new();
    for e in &entries {
        let s = families.entry(e.family).or_insert(FamilySummary {
            checked: 0,
            skipped_kinks: skipped.get(&e.family).copied().unwrap_or(0),
            max_rel_err: 0.0,
            passed: true,
        });
        s.checked += 1;
        s.max_rel_err = s.max_rel_err.max(e.rel_err);
        s.passed = s.max_rel_err < cfg.tolerance;
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        input,
        loss: base.terms.total,
        passed: max_rel_err < cfg.tolerance
            && families.len() == ParamFamily::ALL.len()
            && entries.len() >= cfg.samples,
        families,
        entries,
        max_rel_err,
    })
}
