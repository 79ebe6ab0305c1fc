//! One PASS/FAIL line per acceptance criterion. Run with `cargo test --test acceptance`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hrstnet::attention::{
    compute_attn_mask, effective_shift, window_attention, AttentionParams, AttnMask, MASK_VALUE,
};
use hrstnet::metrics::{brats_regions, dice_score, hd95, mean_foreground_dice, BinaryMask, RegionSpec};
use hrstnet::topology::{self, Hrstnet, ModelConfig};
use hrstnet::training::{
    self, finite_difference_check, load_checkpoint, lr_at, save_checkpoint, Dataset,
    GradcheckConfig, Sample, ScheduleConfig, TrainConfig, Trainer,
};
use hrstnet::volume_io::{
    argmax_labels, generate_synthetic, normalize, read_labels, read_volume, sliding_window_infer,
    write_labels, write_volume, LabelVolume, SyntheticSpec, VolumeTensor,
};
use hrstnet::windowing::{cyclic_shift, window_partition, window_reverse, TokenGrid, WindowSet};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, a: f32) -> Vec<f32> {
    (0..n).map(|_| r.random_range(-a..a)).collect()
}

fn coords(i: usize, dims: [usize; 3]) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

fn golden(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

// ---- closed-form parameter counts ----

fn layer_params(c: usize, h: usize, w: usize, r: usize) -> usize {
    let norms = 2 * (2 * c);
    let proj = 4 * (c * c + c);
    let table = (2 * w - 1).pow(3) * h;
    let mlp = (r * c * c + r * c) + (r * c * c + c);
    norms + proj + table + mlp
}

fn residual_params(cin: usize, cout: usize) -> usize {
    let skip = if cin == cout { 0 } else { cin * cout + cout };
    27 * cin * cout + 27 * cout * cout + skip
}

fn expected_params(cfg: &ModelConfig) -> usize {
    let k = cfg.variant;
    let ch = |r: usize| cfg.embed_dim << r;
    let merge = |r: usize| 16 * ch(r) * ch(r);
    let expand = |c: usize| 4 * c * c;
    let pair = |r: usize| 2 * layer_params(ch(r), cfg.heads[r], cfg.window, cfg.mlp_ratio);
    let up_chain = |r: usize| (1..=r).map(|j| expand(ch(j))).sum::<usize>();

    let mut total = cfg.embed_dim * cfg.in_channels * cfg.patch.pow(3) + cfg.embed_dim;
    for n in 1..=k {
        total += (0..n).map(pair).sum::<usize>();
        let merges = if n < k { n } else { n - 1 };
        total += (0..merges).map(merge).sum::<usize>();
        if n >= 2 {
            // streams 0..n; down chains beyond the stage's own merge, shared up chains, fuses
            for r in 0..n {
                total += (r + 2..n).map(|t| merge(t - 1)).sum::<usize>();
                total += up_chain(r);
            }
            total += (0..n).map(|t| residual_params(n * ch(t), ch(t))).sum::<usize>();
        }
    }
    total += (1..k).map(up_chain).sum::<usize>();
    total += residual_params(k * cfg.embed_dim, cfg.embed_dim);
    let steps = cfg.patch.trailing_zeros() as usize;
    total += (0..steps).map(|i| expand(cfg.embed_dim >> i)).sum::<usize>();
    let c_out = cfg.embed_dim / cfg.patch;
    total + cfg.num_classes * c_out + cfg.num_classes
}

// ---- criteria ----

fn structural_fidelity() -> Check {
    let cfg = ModelConfig::default();
    let t = ok(topology::shape_trace(&cfg, [128; 3]))?;
    ensure!(
        t.to_string().trim_end() == golden("trace_hrstnet4_128.txt").trim_end(),
        "text trace differs from golden"
    );
    ensure!(
        t.to_json().trim_end() == golden("trace_hrstnet4_128.json").trim_end(),
        "JSON trace differs from golden"
    );
    ensure!(t.violations.is_empty(), "violations: {:?}", t.violations);
    ensure!(t.variant == 4 && t.streams.len() == 4, "expected four streams");
    for (r, s) in t.streams.iter().enumerate() {
        let side = 128 / (4 << r);
        ensure!(s.dims == [side; 3], "stream {r} dims {:?}, want {side}³", s.dims);
        ensure!(s.channels == 96 << r, "stream {r} has {} channels", s.channels);
        ensure!(s.heads == [3, 6, 12, 24][r], "stream {r} has {} heads", s.heads);
    }
    ensure!(t.output == [4, 128, 128, 128], "output {:?}", t.output);
    ensure!(cfg.depth == 2, "depth {}", cfg.depth);
    for b in t.blocks.iter().filter(|b| b.kind == "swin") {
        let r = (b.output[0] / 96).trailing_zeros() as usize;
        let want = 2 * layer_params(b.output[0], cfg.heads[r], 4, 4);
        ensure!(b.params == want, "{} has {} params, a two-layer block has {want}", b.name, b.params);
    }
    ensure!(t.total_params == expected_params(&cfg), "total {}", t.total_params);
    Ok(format!("streams 32/16/8/4, heads 3/6/12/24, {} params", t.total_params))
}

fn windowing_bijection() -> Check {
    let mut r = rng(2);
    let mut padded = 0;
    for case in 0..1000 {
        let dims = [0; 3].map(|_| r.random_range(1..=9));
        let w = r.random_range(1..=4);
        let c = r.random_range(1..=3);
        let n: usize = dims.iter().product();
        let grid = ok(TokenGrid::new(dims, c, uniform(&mut r, n * c, 1.0)))?;
        let ws = ok(window_partition(&grid, w))?;
        padded += (ws.padded_dims() != dims) as usize;
        let back = ok(window_reverse(&ws))?;
        ensure!(back == grid, "case {case}: reverse(partition) != id for {dims:?}, w {w}");
        let again = ok(window_partition(&back, w))?;
        ensure!(again == ws, "case {case}: partition(reverse) != id for {dims:?}, w {w}");
    }
    for case in 0..1000 {
        let dims = [0; 3].map(|_| r.random_range(1..=9));
        let shift = [0; 3].map(|_| r.random_range(-12i64..=12));
        let c = r.random_range(1..=3);
        let n: usize = dims.iter().product();
        let grid = ok(TokenGrid::new(dims, c, uniform(&mut r, n * c, 1.0)))?;
        let moved = cyclic_shift(&grid, shift);
        for i in 0..n {
            let p = coords(i, dims);
            let q = [0, 1, 2].map(|a| (p[a] as i64 + shift[a]).rem_euclid(dims[a] as i64) as usize);
            ensure!(
                moved.token(q[0], q[1], q[2]) == grid.token(p[0], p[1], p[2]),
                "case {case}: token {p:?} not at {q:?}"
            );
        }
        let neg = shift.map(|s| -s);
        ensure!(cyclic_shift(&moved, neg) == grid, "case {case}: shift {shift:?} not inverted");
    }
    Ok(format!("2000 cases exact ({padded} with padded windows)"))
}

fn dense_attention(ws: &WindowSet, p: &AttentionParams, mask: Option<&AttnMask>) -> Vec<f64> {
    let (c, w, h) = (p.channels, p.window, p.heads);
    let t = w * w * w;
    let hd = c / h;
    let span = 2 * w - 1;
    let scale = 1.0 / (hd as f64).sqrt();
    let proj = |wt: &[f32], b: &[f32], x: &[f32]| -> Vec<f64> {
        (0..c)
            .map(|o| b[o] as f64 + (0..c).map(|i| wt[o * c + i] as f64 * x[i] as f64).sum::<f64>())
            .collect()
    };
    let mut out = Vec::new();
    for win in 0..ws.num_windows() {
        let x = ws.window_tokens(win);
        let tok = |i: usize| &x[i * c..(i + 1) * c];
        let q: Vec<_> = (0..t).map(|i| proj(&p.q_weight, &p.q_bias, tok(i))).collect();
        let k: Vec<_> = (0..t).map(|i| proj(&p.k_weight, &p.k_bias, tok(i))).collect();
        let v: Vec<_> = (0..t).map(|i| proj(&p.v_weight, &p.v_bias, tok(i))).collect();
        for i in 0..t {
            let mut cat = vec![0.0f64; c];
            for head in 0..h {
                let ch = head * hd..(head + 1) * hd;
                let logits: Vec<f64> = (0..t)
                    .map(|j| {
                        let (a, b) = ([i / (w * w), (i / w) % w, i % w], [j / (w * w), (j / w) % w, j % w]);
                        let off = [0, 1, 2].map(|d| a[d] + w - 1 - b[d]);
                        let row = (off[0] * span + off[1]) * span + off[2];
                        let dot: f64 = ch.clone().map(|e| q[i][e] * k[j][e]).sum();
                        let m = mask.map_or(0.0, |m| m.window(win)[i * t + j] as f64);
                        dot * scale + p.bias_table[row * h + head] as f64 + m
                    })
                    .collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for ce in ch.clone() {
                        cat[ce] += ej / z * v[j][ce];
                    }
                }
            }
            for o in 0..c {
                let s: f64 = (0..c).map(|e| p.o_weight[o * c + e] as f64 * cat[e]).sum();
                out.push(p.o_bias[o] as f64 + s);
            }
        }
    }
    out
}

fn attention_oracle() -> Check {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let mut masked = 0;
    for draw in 0..200 {
        let w = r.random_range(1..=3);
        let heads = r.random_range(1..=3);
        let c = heads * r.random_range(1..=4);
        let dims: [usize; 3] = [0; 3].map(|_| r.random_range(1..=7));
        let mut p = ok(AttentionParams::zeros(c, heads, w))?;
        for v in [
            &mut p.q_weight, &mut p.k_weight, &mut p.v_weight, &mut p.o_weight,
            &mut p.q_bias, &mut p.k_bias, &mut p.v_bias, &mut p.o_bias,
        ] {
            let n = v.len();
            *v = uniform(&mut r, n, 0.5);
        }
        let n = p.bias_table.len();
        p.bias_table = uniform(&mut r, n, 1.0);
        let padded: usize = dims.iter().map(|d| d.div_ceil(w) * w).product();
        let ws = ok(WindowSet::new(uniform(&mut r, padded * c, 1.0), w, c, dims))?;
        let t = w * w * w;
        let mask = r.random_bool(0.5).then(|| {
            masked += 1;
            let windows = ws.num_windows();
            let data = (0..windows * t * t)
                .map(|_| if r.random_bool(0.3) { MASK_VALUE } else { 0.0 })
                .collect();
            AttnMask { windows, tokens: t, data }
        });
        let got = ok(window_attention(&ws, &p, mask.as_ref()))?;
        let want = dense_attention(&ws, &p, mask.as_ref());
        ensure!(got.data().len() == want.len(), "draw {draw}: length mismatch");
        for (g, e) in got.data().iter().zip(&want) {
            worst = worst.max((*g as f64 - e).abs());
        }
        ensure!(worst < 1e-5, "draw {draw}: max abs err {worst:.3e}");
    }
    Ok(format!("200 draws ({masked} masked), max abs err {worst:.2e}"))
}

fn shift_mask_isolation() -> Check {
    let mut r = rng(4);
    let mut mixed_windows = 0;
    for case in 0..50 {
        let w = r.random_range(2..=4);
        let dims = loop {
            let d = [0; 3].map(|_| r.random_range(1..=12));
            if d.iter().any(|&v| v > w) {
                break d;
            }
        };
        let s = effective_shift(dims, w, [w / 2; 3]);
        let c = 8;
        let heads = [1, 2, 4, 8][r.random_range(0..4)];
        let region = |p: [usize; 3]| (0..3).map(|a| ((p[a] < s[a]) as usize) << a).sum::<usize>();
        let n: usize = dims.iter().product();
        let mut data = vec![0.0f32; n * c];
        for i in 0..n {
            data[i * c + region(coords(i, dims))] = 1.0;
        }
        let grid = ok(TokenGrid::new(dims, c, data))?;

        let mut p = ok(AttentionParams::zeros(c, heads, w))?;
        p.q_weight = uniform(&mut r, c * c, 1.0);
        p.k_weight = uniform(&mut r, c * c, 1.0);
        p.q_bias = uniform(&mut r, c, 1.0);
        p.k_bias = uniform(&mut r, c, 1.0);
        let nt = p.bias_table.len();
        p.bias_table = uniform(&mut r, nt, 2.0);
        for i in 0..c {
            p.v_weight[i * c + i] = 1.0;
            p.o_weight[i * c + i] = 1.0;
        }

        let shifted = cyclic_shift(&grid, s.map(|v| -(v as i64)));
        let ws = ok(window_partition(&shifted, w))?;
        let mask = compute_attn_mask(dims, w, s);
        let t = w * w * w;
        for win in 0..ws.num_windows() {
            let m = mask.window(win);
            mixed_windows += m.iter().take(t * t).any(|&v| v != 0.0) as usize;
        }
        let out = ok(window_attention(&ws, &p, Some(&mask)))?;
        let back = cyclic_shift(&ok(window_reverse(&out))?, s.map(|v| v as i64));
        for i in 0..n {
            let pos = coords(i, dims);
            let own = region(pos);
            let tok = back.token(pos[0], pos[1], pos[2]);
            for (ch, &v) in tok.iter().enumerate() {
                if ch == own {
                    ensure!((v - 1.0).abs() < 1e-6, "case {case}: own-region weight {v} at {pos:?}");
                } else {
                    ensure!(v == 0.0, "case {case}: region {ch} leaked {v:e} into {pos:?} (region {own})");
                }
            }
        }
    }
    ensure!(mixed_windows > 0, "no configuration produced a masked window");
    Ok(format!("50 configs exact, {mixed_windows} windows span several regions"))
}

fn gradient_correctness() -> Check {
    let cfg = GradcheckConfig::default();
    ensure!(
        cfg.model.variant == 2 && cfg.model.embed_dim == 8 && cfg.model.window == 2,
        "gradcheck model is not the tiny HRSTNet-2"
    );
    let rep = ok(finite_difference_check(&cfg))?;
    let m = cfg.model.min_multiple();
    ensure!(rep.input == [m; 3], "input {:?} is not the minimal {m}³", rep.input);
    ensure!(rep.entries.len() >= 200, "only {} parameters checked", rep.entries.len());
    ensure!(rep.families.len() == 9, "{} families covered", rep.families.len());
    for (f, s) in &rep.families {
        ensure!(s.checked > 0, "family {f:?} has no checked entries");
    }
    ensure!(rep.max_rel_err < 1e-3, "max rel err {:.3e}", rep.max_rel_err);
    ensure!(rep.passed, "report not passed: {:?}", rep.failed_families());
    Ok(format!(
        "{} entries, 9 families, max rel err {:.2e}",
        rep.entries.len(),
        rep.max_rel_err
    ))
}

fn synthetic_sample(seed: u64, side: usize) -> Result<Sample, String> {
    let g = ok(generate_synthetic(&SyntheticSpec {
        seed,
        dims: [side; 3],
        radius: [3.0, 5.0],
        noise_std: 0.1,
        ..Default::default()
    }))?;
    Ok(Sample {
        image: normalize(&g.image),
        labels: g.labels,
    })
}

fn overfit() -> Check {
    let model = ModelConfig::tiny();
    let sample = synthetic_sample(1, 16)?;
    let cfg = TrainConfig {
        epochs: 300,
        crop: [16; 3],
        base_lr: 2e-2,
        warmup_epochs: 50,
        val_every: 50,
        ..Default::default()
    };
    let data = Dataset {
        train: vec![sample.clone()],
        val: Vec::new(),
    };
    let out = ok(training::train(&cfg, &model, &data, None))?;
    ensure!(out.log.len() == 300, "{} steps", out.log.len());
    let net = ok(Hrstnet::from_params(model.clone(), out.last.params))?;
    let loss = ok(net.loss(&sample.image, &sample.labels))?.total;
    let logits = ok(sliding_window_infer(&net, &sample.image, [16; 3], 0.5))?;
    let pred = ok(argmax_labels(&logits))?;
    let dice = ok(mean_foreground_dice(&pred, &sample.labels, model.num_classes))?;
    let head: f64 = out.log[..30].iter().map(|r| r.loss).sum::<f64>() / 30.0;
    let tail: f64 = out.log[270..].iter().map(|r| r.loss).sum::<f64>() / 30.0;
    ensure!(tail < head, "loss did not trend down ({head:.4} -> {tail:.4})");
    ensure!(loss < 0.05, "combined loss {loss:.4}");
    ensure!(dice >= 0.95, "Dice {dice:.4}");
    Ok(format!("300 steps, loss {loss:.4}, Dice {dice:.4}"))
}

fn schedule_values() -> Check {
    let mut checked = 0;
    for (spe, min_lr) in [(1, 0.0), (4, 0.0), (7, 1e-6)] {
        let s = ScheduleConfig {
            steps_per_epoch: spe,
            min_lr,
            ..Default::default()
        };
        ok(s.validate())?;
        let (warm, last) = (50 * spe, 300 * spe - 1);
        ensure!(lr_at(0, &s) == 0.0, "lr(0) = {}", lr_at(0, &s));
        ensure!(lr_at(warm, &s) == 1e-4, "lr at end of warmup = {}", lr_at(warm, &s));
        ensure!(lr_at(last, &s) == min_lr, "lr(final) = {}", lr_at(last, &s));
        let ramp = 1e-4 * warm as f64 / warm as f64;
        ensure!((ramp - lr_at(warm, &s)).abs() < 1e-9, "discontinuous at warmup end");
        for step in 0..=last {
            let want = if step < warm {
                1e-4 * step as f64 / warm as f64
            } else {
                let t = (step - warm) as f64 / (last - warm) as f64;
                min_lr + (1e-4 - min_lr) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
            };
            ensure!((lr_at(step, &s) - want).abs() < 1e-15, "step {step}: {} vs {want}", lr_at(step, &s));
            if step > 0 {
                let jump = (lr_at(step, &s) - lr_at(step - 1, &s)).abs();
                ensure!(jump <= 1e-4 / warm as f64 + 1e-12, "jump {jump:e} at step {step}");
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} steps across 3 schedules"))
}

fn brute_hd95(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let dims = a.dims();
    let sp = a.spacing().map(|v| v as f64);
    let fg = |m: &BinaryMask, p: [i64; 3]| {
        (0..3).all(|k| p[k] >= 0 && (p[k] as usize) < dims[k])
            && m.data()[((p[0] as usize) * dims[1] + p[1] as usize) * dims[2] + p[2] as usize]
    };
    let surface = |m: &BinaryMask| -> Vec<[i64; 3]> {
        let n: usize = dims.iter().product();
        (0..n)
            .filter(|&i| m.data()[i])
            .map(|i| coords(i, dims).map(|v| v as i64))
            .filter(|p| {
                [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
                    .iter()
                    .any(|d| !fg(m, [p[0] + d[0], p[1] + d[1], p[2] + d[2]]))
            })
            .collect()
    };
    let (na, nb) = (a.data().iter().any(|&v| v), b.data().iter().any(|&v| v));
    if !na && !nb {
        return 0.0;
    }
    if na != nb {
        return (0..3).map(|k| (dims[k] as f64 * sp[k]).powi(2)).sum::<f64>().sqrt();
    }
    let (sa, sb) = (surface(a), surface(b));
    let nearest = |p: &[i64; 3], set: &[[i64; 3]]| {
        set.iter()
            .map(|q| (0..3).map(|k| ((p[k] - q[k]) as f64 * sp[k]).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let mut d: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    d.extend(sb.iter().map(|p| nearest(p, &sa)));
    d.sort_by(f64::total_cmp);
    // numpy "linear" interpolation
    let pos = 0.95 * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    let t = pos - lo as f64;
    let diff = d[hi] - d[lo];
    if t >= 0.5 {
        d[hi] - diff * (1.0 - t)
    } else {
        d[lo] + diff * t
    }
}

fn random_mask(r: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f32; 3]) -> BinaryMask {
    let n: usize = dims.iter().product();
    let data = match r.random_range(0..10) {
        0 => vec![false; n],
        1..=3 => {
            let c = dims.map(|d| r.random_range(0.0..d as f64));
            let rad = r.random_range(0.5..4.0);
            (0..n)
                .map(|i| {
                    let p = coords(i, dims);
                    (0..3).map(|k| (p[k] as f64 - c[k]).powi(2)).sum::<f64>() <= rad * rad
                })
                .collect()
        }
        _ => {
            let density = r.random_range(0.02..0.7);
            (0..n).map(|_| r.random_bool(density)).collect()
        }
    };
    BinaryMask::new(dims, spacing, data).expect("mask")
}

fn metric_oracles() -> Check {
    let mut r = rng(8);
    let grid = [0.5f32, 1.0, 1.5, 2.0];
    let mut sentinels = 0;
    for case in 0..500 {
        let dims = [0; 3].map(|_| r.random_range(1..=12));
        let spacing = if case % 2 == 0 {
            [1.0; 3]
        } else {
            [0; 3].map(|_| grid[r.random_range(0..4)])
        };
        let a = random_mask(&mut r, dims, spacing);
        let b = random_mask(&mut r, dims, spacing);
        sentinels += (a.is_empty() != b.is_empty()) as usize;
        let got = ok(hd95(&a, &b))?;
        let want = brute_hd95(&a, &b);
        ensure!(got == want, "case {case}: hd95 {got} vs brute force {want} ({dims:?}, {spacing:?})");
    }

    let dims = [6, 5, 4];
    let n = 120;
    let m = |f: &dyn Fn(usize) -> bool| BinaryMask::new(dims, [1.0; 3], (0..n).map(f).collect()).unwrap();
    let a = m(&|i| i < 30);
    ensure!(ok(dice_score(&a, &a))? == 1.0, "identical masks");
    ensure!(ok(dice_score(&a, &m(&|i| i >= 60)))? == 0.0, "disjoint masks");
    ensure!(ok(dice_score(&m(&|i| i < 20), &m(&|i| i < 60)))? == 0.5, "one-third subset");

    let mut volumes = 0;
    for _ in 0..200 {
        let ids: Vec<u32> = {
            let mut v = vec![1, 2, 3];
            for i in (1..3).rev() {
                v.swap(i, r.random_range(0..=i));
            }
            v
        };
        let spec = RegionSpec::brats(ids[0], ids[1], ids[2]);
        let dims = [0; 3].map(|_| r.random_range(1..=8));
        let n: usize = dims.iter().product();
        let labels = ok(LabelVolume::new(dims, 4, (0..n).map(|_| r.random_range(0..4)).collect()))?;
        let regions = ok(brats_regions(&labels, &spec))?;
        let get = |name: &str| &regions.iter().find(|(n, _)| n == name).expect("region").1;
        let (wt, tc, et) = (get("WT"), get("TC"), get("ET"));
        for i in 0..n {
            ensure!(!et.data()[i] || tc.data()[i], "ET outside TC");
            ensure!(!tc.data()[i] || wt.data()[i], "TC outside WT");
        }
        volumes += 1;
    }
    Ok(format!(
        "500 hd95 cases exact ({sentinels} one-sided empty), dice 1/0/0.5, nesting over {volumes} volumes"
    ))
}

fn persistence_data() -> Result<Dataset, String> {
    Ok(Dataset {
        train: vec![synthetic_sample(11, 16)?, synthetic_sample(12, 16)?],
        val: vec![synthetic_sample(13, 16)?],
    })
}

fn persistence_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        crop: [8; 3],
        seed: 5,
        val_every: 2,
        base_lr: 1e-2,
        warmup_epochs: 1,
        ..Default::default()
    }
}

fn determinism_and_persistence() -> Check {
    let model = ModelConfig::tiny();
    let data = persistence_data()?;
    let cfg = persistence_config();
    let tmp = ok(tempfile::tempdir())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let run_a = ok(training::train(&cfg, &model, &data, Some(&a)))?;
    ok(training::train(&cfg, &model, &data, Some(&b)))?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    let log_a = read(&a.join(training::LOG_FILE))?;
    ensure!(log_a == read(&b.join(training::LOG_FILE))?, "CSV logs differ");
    ensure!(
        read(&a.join(training::LAST_CKPT))? == read(&b.join(training::LAST_CKPT))?,
        "final checkpoints differ"
    );

    let mut t = ok(Trainer::new(cfg.clone(), model.clone()))?;
    let mut losses = Vec::new();
    for _ in 0..2 {
        losses.extend(ok(t.run_epoch(&data))?.0.into_iter().map(|r| r.loss.to_bits()));
    }
    let ck = tmp.path().join("mid.ckpt");
    ok(save_checkpoint(&t.checkpoint(), &ck))?;
    drop(t);
    let loaded = ok(load_checkpoint(&ck))?;
    let mut t = ok(Trainer::from_checkpoint(loaded.clone()))?;
    while !t.finished() {
        losses.extend(ok(t.run_epoch(&data))?.0.into_iter().map(|r| r.loss.to_bits()));
    }
    let straight: Vec<u64> = run_a.log.iter().map(|r| r.loss.to_bits()).collect();
    ensure!(losses == straight, "resumed loss sequence differs");
    ensure!(t.checkpoint() == run_a.last, "resumed final state differs");

    let c = tmp.path().join("c");
    std::fs::create_dir_all(&c).map_err(|e| e.to_string())?;
    std::fs::copy(a.join(training::LOG_FILE), c.join(training::LOG_FILE)).map_err(|e| e.to_string())?;
    ok(training::resume(loaded, &data, Some(&c)))?;
    ensure!(read(&c.join(training::LOG_FILE))? == log_a, "resumed CSV differs");

    let mut r = rng(9);
    let mut bits = vec![0.0f32, -0.0, f32::MIN_POSITIVE / 3.0, f32::MAX, -f32::MAX, 1.0e-30];
    bits.extend(uniform(&mut r, 3 * 5 * 6 * 7 - bits.len(), 1e3));
    let vol = ok(VolumeTensor::with_spacing(3, [5, 6, 7], [0.9, 1.1, 2.5], bits))?;
    let vp = tmp.path().join("v.hvol");
    ok(write_volume(&vol, &vp))?;
    let back = ok(read_volume(&vp))?;
    ensure!(back.dims() == vol.dims() && back.channels() == 3, "volume shape changed");
    ensure!(back.spacing() == vol.spacing(), "spacing changed");
    ensure!(
        back.data().iter().zip(vol.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
        "volume bits changed"
    );
    let labels = ok(LabelVolume::new([4, 5, 6], 7, (0..120).map(|_| r.random_range(0..7)).collect()))?;
    let labels = ok(labels.with_spacing([1.0, 0.5, 3.0]))?;
    let lp = tmp.path().join("l.hvol");
    ok(write_labels(&labels, &lp))?;
    ensure!(ok(read_labels(&lp, Some(7)))? == labels, "label round trip differs");
    Ok(format!("{} steps identical, resume at epoch 2 exact, round trips bit-exact", straight.len()))
}

fn random_config(r: &mut ChaCha8Rng) -> ModelConfig {
    let patch = [1, 2, 4][r.random_range(0..3)];
    let h0 = r.random_range(1..=3);
    let mult = if patch == 1 { 1 } else { patch };
    ModelConfig {
        variant: r.random_range(2..=4),
        embed_dim: h0 * mult * r.random_range(1..=3),
        patch,
        window: r.random_range(1..=4),
        heads: (0..4).map(|i| h0 << i).collect(),
        depth: 2,
        mlp_ratio: r.random_range(1..=4),
        in_channels: r.random_range(1..=4),
        num_classes: r.random_range(2..=5),
    }
}

fn bookkeeping() -> Check {
    let mut r = rng(10);
    let mut concats = 0;
    let mut v3 = ModelConfig::tiny();
    v3.variant = 3;
    for case in 0..=50 {
        let cfg = if case == 50 { v3.clone() } else { random_config(&mut r) };
        ok(cfg.validate()).map_err(|e| format!("case {case}: {e}"))?;
        let counted = ok(topology::param_count(&cfg))?;
        let net = ok(Hrstnet::new(cfg.clone(), case as u64))?;
        let allocated: usize = net.params().tensors().iter().map(|t| t.data.len()).sum();
        let formula = expected_params(&cfg);
        ensure!(
            counted == allocated && counted == formula && net.param_count() == counted,
            "case {case} {cfg:?}: param_count {counted}, allocated {allocated}, formula {formula}"
        );
        let m = cfg.min_multiple();
        let trace = ok(topology::shape_trace(&cfg, [m; 3]))?;
        ensure!(trace.total_params == counted, "case {case}: trace total {}", trace.total_params);
        let block_sum: usize = trace.blocks.iter().map(|b| b.params).sum();
        ensure!(block_sum == counted, "case {case}: blocks sum to {block_sum}");
        let mut seen = HashSet::new();
        for b in trace.blocks.iter().filter(|b| b.kind == "concat") {
            if b.name == "head.cat" {
                ensure!(b.output[0] == cfg.variant * cfg.embed_dim, "head.cat has {} channels", b.output[0]);
                continue;
            }
            let rest = b.name.strip_prefix("mrff").ok_or(format!("unexpected concat {}", b.name))?;
            let (n, t) = rest.split_once(".cat").ok_or(format!("unexpected concat {}", b.name))?;
            let (n, t): (usize, usize) = (n.parse().map_err(|_| b.name.clone())?, t.parse().map_err(|_| b.name.clone())?);
            let c_t = cfg.embed_dim << t;
            ensure!(b.inputs.len() == n, "{}: {} inputs", b.name, b.inputs.len());
            ensure!(b.inputs.iter().all(|s| s[0] == c_t), "{}: inputs {:?}", b.name, b.inputs);
            ensure!(b.output[0] == n * c_t, "{}: {} channels, law gives {}", b.name, b.output[0], n * c_t);
            seen.insert((n, t));
            concats += 1;
        }
        let want: usize = (2..=cfg.variant).sum();
        ensure!(seen.len() == want, "case {case}: {} MRFF concats, expected {want}", seen.len());
    }
    ensure!(expected_params(&v3) == 257_402, "variant-3 tiny formula");
    Ok(format!("51 configs agree, {concats} MRFF concats follow n·C·2^t"))
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "structural fidelity", budget: Duration::from_secs(1), run: structural_fidelity },
        Criterion { id: 2, name: "windowing bijection", budget: Duration::from_secs(10), run: windowing_bijection },
        Criterion { id: 3, name: "attention oracle", budget: Duration::from_secs(30), run: attention_oracle },
        Criterion { id: 4, name: "shift-mask isolation", budget: Duration::from_secs(10), run: shift_mask_isolation },
        Criterion { id: 5, name: "gradient correctness", budget: Duration::from_secs(600), run: gradient_correctness },
        Criterion { id: 6, name: "overfit oracle", budget: Duration::from_secs(1800), run: overfit },
        Criterion { id: 7, name: "schedule values", budget: Duration::from_secs(1), run: schedule_values },
        Criterion { id: 8, name: "metric oracles", budget: Duration::from_secs(60), run: metric_oracles },
        Criterion { id: 9, name: "determinism and persistence", budget: Duration::from_secs(300), run: determinism_and_persistence },
        Criterion { id: 10, name: "parameter bookkeeping", budget: Duration::from_secs(60), run: bookkeeping },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str()) || *f == c.id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let res = (c.run)();
        let took = start.elapsed();
        let res = match res {
            Ok(m) if took > c.budget => Err(format!("{m}; exceeded {:?} budget", c.budget)),
            r => r,
        };
        match res {
            Ok(m) => println!("PASS [{:>2}] {:<28} {:>9.3}s  {m}", c.id, c.name, took.as_secs_f64()),
            Err(m) => {
                failed += 1;
                println!("FAIL [{:>2}] {:<28} {:>9.3}s  {m}", c.id, c.name, took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
