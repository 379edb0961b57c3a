//! Independent reference computations shared by the integration tests and the
//! acceptance runner. Nothing here calls the library routine it checks.
#![allow(dead_code)]

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use gensc_core::channel::{
    awgn, power_normalize, power_normalize_tensor, transmit, ChannelKind, ChannelSpec, SymbolVector,
};
use gensc_core::classical_baseline::{
    jpeg_decode, jpeg_encode, modulate_interleaved, qam_demodulate, Bitstream, ClassicalBaseline, BaselineConfig,
    LdpcCode,
};
use gensc_core::diffusion_refiner::networks::Dmta;
use gensc_core::diffusion_refiner::{loss_joint, loss_l1, loss_l2, make_schedule, NoiseSchedule, PriorRepresentation};
use gensc_core::metrics::{psnr_per_image, ssim_per_image};
use gensc_core::nn::ParamStore;
use gensc_core::semantic_codec::swin::{dense_attention, SnrBuckets, SwinBlock, SwinStageConfig, TokenGrid};
use gensc_core::semantic_codec::{CodecConfig, ImageBatch, LatentCode, SemanticCodec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)).collect()
}

pub fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Smooth-ish random images so SSIM is not trivially tiny.
pub fn random_images(n: usize, side: usize, seed: u64) -> ImageBatch {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(n * side * side * 3);
    for _ in 0..n {
        let base = [r.random_range(0.2..0.8), r.random_range(0.2..0.8), r.random_range(0.2..0.8)];
        let fx: f64 = r.random_range(0.1..0.6);
        for y in 0..side {
            for x in 0..side {
                for b in base {
                    let wave = 0.15 * ((x as f64 * fx).sin() + (y as f64 * fx * 0.7).cos());
                    let v: f64 = b + wave + r.random_range(-0.05..0.05);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    ImageBatch::from_vec(data, n, side, side, &Device::Cpu).unwrap()
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

pub fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- channel

/// Realized AWGN SNR (dB) for each target over `k` symbols.
pub fn awgn_realized_snr(targets: &[f64], k: usize, seed: u64) -> Result<Vec<(f64, f64)>, String> {
    let x = SymbolVector::new(Tensor::from_vec(normals(2 * k, seed), (1, k, 2), &Device::Cpu).map_err(e)?)
        .map_err(e)?;
    let x = power_normalize_tensor(x.tensor()).map_err(e)?;
    let xs = x.row_interleaved(0).map_err(e)?;
    let signal: f64 = xs.iter().map(|v| v * v).sum::<f64>() / k as f64;
    let mut out = Vec::new();
    for (i, &snr) in targets.iter().enumerate() {
        let y = awgn(&x, snr, seed.wrapping_add(1 + i as u64)).map_err(e)?;
        let ys = y.row_interleaved(0).map_err(e)?;
        let noise: f64 = ys.iter().zip(&xs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / k as f64;
        out.push((snr, 10.0 * (signal / noise).log10()));
    }
    Ok(out)
}

/// Mean `|h|²` of the fading drawn by one Rayleigh transmission of `k` symbols.
pub fn rayleigh_gain(k: usize, seed: u64) -> Result<f64, String> {
    let x = SymbolVector::new(Tensor::ones((1, k, 2), DType::F64, &Device::Cpu).map_err(e)?).map_err(e)?;
    let spec = ChannelSpec {
        kind: ChannelKind::Rayleigh,
        snr_db: 10.0,
        mask_density: 1.0,
    };
    let (_, real) = transmit(&x, &spec, seed).map_err(e)?;
    let h: Vec<f64> = real.fading.ok_or("no fading recorded")?.flatten_all().map_err(e)?.to_vec1().map_err(e)?;
    Ok(h.chunks(2).map(|c| c[0] * c[0] + c[1] * c[1]).sum::<f64>() / k as f64)
}

/// Largest `|P − 1|` over `count` random latents of varied scale.
pub fn power_constraint_error(count: usize, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let scale = 10f64.powf(r.random_range(-3.0..3.0));
        let v: Vec<f64> = normals(4 * 4 * 32, seed ^ (i as u64 + 1)).into_iter().map(|x| x * scale).collect();
        let latent = LatentCode::new(Tensor::from_vec(v, (1, 4, 4, 32), &Device::Cpu).map_err(e)?).map_err(e)?;
        let sym = power_normalize(&latent).map_err(e)?;
        // recompute the power from the raw values rather than trusting mean_power
        let vals = sym.row_interleaved(0).map_err(e)?;
        let p = vals.iter().map(|x| x * x).sum::<f64>() / (vals.len() / 2) as f64;
        worst = worst.max((p - 1.0).abs());
    }
    Ok(worst)
}

// -------------------------------------------------------------- diffusion

/// `β` by explicit interpolation and `ᾱ` by repeated multiplication.
pub fn schedule_oracle(steps: usize, b0: f64, b1: f64) -> (Vec<f64>, Vec<f64>) {
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                b1
            } else {
                b0 + (b1 - b0) * (i as f64) / ((steps - 1) as f64)
            }
        })
        .collect();
    let mut alpha_bar = Vec::new();
    for t in 0..steps {
        let mut prod = 1.0;
        for b in &beta[..=t] {
            prod *= 1.0 - b;
        }
        alpha_bar.push(prod);
    }
    (beta, alpha_bar)
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), (1, v.len()), &Device::Cpu).unwrap()
}

fn tensor_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

/// Runs the stepwise forward chain with per-step noises `n_t`, then the
/// reverse chain with an oracle noise predictor. The reverse step removes
/// `(1 − α_t)/√(1 − ᾱ_t) · ε̂` while the forward step added `√β_t · n_t`, so
/// the oracle answers `ε̂_t = √(1 − ᾱ_t)/√β_t · n_t` (equal to `n_1` at t = 1).
/// Returns the relative error `‖ẑ₀ − z₀‖ / ‖z₀‖`.
pub fn oracle_round_trip(s: &NoiseSchedule, z0: &[f64], seed: u64) -> f64 {
    let (_, alpha_bar) = schedule_oracle(s.steps(), s.beta()[0], s.beta()[s.steps() - 1]);
    let mut z = vec_tensor(z0);
    let mut noises = Vec::new();
    for t in 1..=s.steps() {
        let n = vec_tensor(&normals(z0.len(), seed ^ (t as u64) << 8));
        z = s.forward_step(&z, t, &n).unwrap();
        noises.push(n);
    }
    for t in (1..=s.steps()).rev() {
        let factor = (1.0 - alpha_bar[t - 1]).sqrt() / s.beta()[t - 1].sqrt();
        let eps = (&noises[t - 1] * factor).unwrap();
        z = s.reverse_step(&z, t, &eps).unwrap();
    }
    let out = tensor_vec(&z);
    let num: f64 = out.iter().zip(z0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = z0.iter().map(|v| v * v).sum::<f64>().sqrt();
    num / den
}

/// Worst relative error of the oracle round trip over `count` random vectors
/// of dimension `dim`, and the worst single-step (t = 1) absolute error.
pub fn diffusion_round_trip(count: usize, dim: usize) -> Result<(f64, f64), String> {
    let s = make_schedule(4, 0.10, 0.99).map_err(e)?;
    let mut worst: f64 = 0.0;
    let mut single: f64 = 0.0;
    for i in 0..count {
        let z0 = normals(dim, 1000 + i as u64);
        worst = worst.max(oracle_round_trip(&s, &z0, 77 + i as u64));
        let eps = vec_tensor(&normals(dim, 5000 + i as u64));
        let z1 = s.forward_diffuse(&vec_tensor(&z0), 1, &eps).map_err(e)?;
        let back = tensor_vec(&s.reverse_step(&z1, 1, &eps).map_err(e)?);
        for (a, b) in back.iter().zip(&z0) {
            single = single.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    Ok((worst, single))
}

// ------------------------------------------------------------- gradients

/// Compares autodiff with central differences on `samples` random entries of
/// every variable in `vars`. Returns the worst relative error
/// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` over the variables.
pub fn gradient_check(vars: &[(String, Var)], loss: &dyn Fn() -> Tensor, samples: usize, seed: u64) -> Result<f64, String> {
    const H: f64 = 1e-6;
    let grads = loss().backward().map_err(e)?;
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for (name, var) in vars {
        let Some(g) = grads.get(var.as_tensor()) else {
            return Err(format!("no gradient reached `{name}`"));
        };
        let g = tensor_vec(g);
        let base = tensor_vec(var.as_tensor());
        let shape = var.as_tensor().shape().clone();
        let picks: Vec<usize> = (0..samples.min(base.len())).map(|_| r.random_range(0..base.len())).collect();
        let (mut num, mut da, mut dn) = (0.0, 0.0, 0.0);
        for &i in &picks {
            let eval = |delta: f64| -> f64 {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            num += (g[i] - fd).powi(2);
            da += g[i] * g[i];
            dn += fd * fd;
        }
        var.set(&Tensor::from_vec(base, shape, &Device::Cpu).unwrap()).map_err(e)?;
        let scale = da.sqrt().max(dn.sqrt());
        if scale > 0.0 {
            worst = worst.max(num.sqrt() / scale);
        }
    }
    Ok(worst)
}

fn fixed_weights(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(normals(n, seed), shape, &Device::Cpu).unwrap()
}

fn var_of(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Var {
    let n = shape.iter().product();
    Var::from_tensor(&Tensor::from_vec(uniform(n, lo, hi, seed), shape, &Device::Cpu).unwrap()).unwrap()
}

/// One shifted swin block: input tokens and every parameter.
pub fn grad_swin_block() -> Result<f64, String> {
    let store = ParamStore::new(11);
    let vb = store.var_builder(DType::F64, &Device::Cpu);
    let cfg = SwinStageConfig {
        patch_size: 4,
        window_size: 2,
        shift: 1,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 1,
    };
    let block = SwinBlock::new(cfg, 2, SnrBuckets::new(1, 13).unwrap(), vb.pp("b")).map_err(e)?;
    let x = var_of(&[1, 4, 4, 8], -1.0, 1.0, 3);
    let w = fixed_weights(&[1, 4, 4, 8], 4);
    let loss = || {
        let emb = block.target_embedding(7.0).unwrap();
        let out = block.forward(&TokenGrid::new(x.as_tensor().clone()).unwrap(), &emb).unwrap();
        (out.tensor() * &w).unwrap().sum_all().unwrap()
    };
    let mut vars = vec![("input".to_string(), x.clone())];
    vars.extend(store.vars());
    gradient_check(&vars, &loss, 6, 9)
}

/// Power normalisation followed by AWGN and by Rayleigh with equalisation.
pub fn grad_channel_path() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for kind in [ChannelKind::Awgn, ChannelKind::Rayleigh] {
        let x = var_of(&[2, 2, 2, 8], -1.0, 1.0, 21);
        let w = fixed_weights(&[2, 2, 2, 8], 22);
        let spec = ChannelSpec {
            kind,
            snr_db: 5.0,
            mask_density: 1.0,
        };
        let loss = || {
            let latent = LatentCode::new(x.as_tensor().clone()).unwrap();
            let y = gensc_core::channel::transmit_latent(&latent, &spec, 5).unwrap();
            (y.values() * &w).unwrap().sum_all().unwrap()
        };
        worst = worst.max(gradient_check(&[("latent".into(), x.clone())], &loss, 16, 23)?);
    }
    Ok(worst)
}

/// `loss_l1`, `loss_l2` and `loss_joint`, plus the identity
/// `∇(ℒ₁ + ℒ₂) = ∇ℒ₁ + ∇ℒ₂`.
pub fn grad_losses() -> Result<f64, String> {
    let target = ImageBatch::new(Tensor::from_vec(uniform(2 * 8 * 8 * 3, 0.0, 1.0, 31), (2, 8, 8, 3), &Device::Cpu).unwrap())
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap();
    let img = var_of(&[2, 8, 8, 3], 0.05, 0.95, 32);
    let z0 = PriorRepresentation::new(Tensor::from_vec(normals(2 * 16, 33), (2, 16), &Device::Cpu).unwrap(), 16).unwrap();
    let z = var_of(&[2, 16], -2.0, 2.0, 34);
    let l1 = || loss_l1(&target, &ImageBatch::new(img.as_tensor().clone()).unwrap()).unwrap();
    let l2 = || loss_l2(&PriorRepresentation::new(z.as_tensor().clone(), 16).unwrap(), &z0).unwrap();
    let joint = || loss_joint(&l1(), &l2()).unwrap();
    let mut worst: f64 = 0.0;
    worst = worst.max(gradient_check(&[("image".into(), img.clone())], &l1, 24, 35)?);
    worst = worst.max(gradient_check(&[("z".into(), z.clone())], &l2, 16, 36)?);
    worst = worst.max(gradient_check(&[("image".into(), img.clone()), ("z".into(), z.clone())], &joint, 16, 37)?);

    let gj = joint().backward().map_err(e)?;
    let g1 = l1().backward().map_err(e)?;
    let g2 = l2().backward().map_err(e)?;
    for (var, part) in [(&img, &g1), (&z, &g2)] {
        let a = tensor_vec(gj.get(var.as_tensor()).ok_or("joint gradient missing")?);
        let b = tensor_vec(part.get(var.as_tensor()).ok_or("component gradient missing")?);
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if diff > 1e-12 {
            return Err(format!("joint gradient differs from component sum by {diff:e}"));
        }
    }
    Ok(worst)
}

/// One DMTA block: input map, prior vector and every parameter.
pub fn grad_dmta() -> Result<f64, String> {
    let store = ParamStore::new(41);
    let vb = store.var_builder(DType::F64, &Device::Cpu);
    let dmta = Dmta::new(8, 2, 12, vb.pp("dmta")).map_err(e)?;
    let x = var_of(&[2, 8, 4, 4], -1.0, 1.0, 42);
    let z = var_of(&[2, 12], -1.0, 1.0, 43);
    let w = fixed_weights(&[2, 8, 4, 4], 44);
    let loss = || (dmta.forward(x.as_tensor(), z.as_tensor()).unwrap() * &w).unwrap().sum_all().unwrap();
    let mut vars = vec![("input".to_string(), x.clone()), ("prior".to_string(), z.clone())];
    vars.extend(store.vars());
    gradient_check(&vars, &loss, 6, 45)
}

// -------------------------------------------------------------- attention

/// Dense attention of one shifted or unshifted swin block rebuilt by brute
/// force over all token pairs, compared with the block's window attention
/// scattered into the same dense layout. Returns the largest difference and
/// the number of token pairs the block let interact outside the oracle's
/// locality pattern.
pub fn attention_oracle(rows: usize, cols: usize, ws: usize, shift: usize) -> Result<(f64, usize), String> {
    let (dim, heads) = (8, 2);
    let hd = dim / heads;
    let store = ParamStore::new(51);
    let vb = store.var_builder(DType::F64, &Device::Cpu);
    let cfg = SwinStageConfig {
        patch_size: 4,
        window_size: ws,
        shift,
        embed_dim: dim,
        num_heads: heads,
        num_layers: 1,
    };
    let block = SwinBlock::new(cfg, 2, SnrBuckets::new(1, 13).unwrap(), vb.pp("b")).map_err(e)?;
    let raw = normals(rows * cols * dim, 52);
    let x = Tensor::from_vec(raw.clone(), (1, rows, cols, dim), &Device::Cpu).map_err(e)?;
    let emb = block.target_embedding(4.0).map_err(e)?;
    let trace = block
        .forward_with_attention(&TokenGrid::new(x).map_err(e)?, &emb)
        .map_err(e)?;
    let got = dense_attention(&trace.window_attention, rows, cols, ws, shift).map_err(e)?;

    // oracle: embedding, fresh layer norm (unit weight, zero bias), projections
    let ev = tensor_vec(&emb.vector);
    let l = rows * cols;
    let mut normed = vec![vec![0.0; dim]; l];
    for t in 0..l {
        let v: Vec<f64> = (0..dim).map(|c| raw[t * dim + c] + ev[c]).collect();
        let mu = v.iter().sum::<f64>() / dim as f64;
        let var = v.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / dim as f64;
        normed[t] = v.iter().map(|a| (a - mu) / (var + 1e-5).sqrt()).collect();
    }
    let qkv_w = tensor_vec(block.attention().qkv().weight());
    let qkv_b = tensor_vec(block.attention().qkv().bias().ok_or("qkv has no bias")?);
    let project = |t: usize, row: usize| -> f64 {
        qkv_b[row] + (0..dim).map(|c| qkv_w[row * dim + c] * normed[t][c]).sum::<f64>()
    };
    let bias = tensor_vec(&block.attention().position_bias().map_err(e)?);
    let n = ws * ws;
    // shifted-frame coordinates of an original token, its window and wrap flags
    let frame = |t: usize| -> (usize, usize) { ((t / cols + rows - shift) % rows, (t % cols + cols - shift) % cols) };
    let wraps = |p: usize, size: usize| p + shift >= size;
    let mut max_diff: f64 = 0.0;
    let mut leaks = 0;
    for h in 0..heads {
        for a in 0..l {
            let (ra, ca) = frame(a);
            let mut logits = vec![f64::NEG_INFINITY; l];
            for (b, slot) in logits.iter_mut().enumerate() {
                let (rb, cb) = frame(b);
                let same_window = ra / ws == rb / ws && ca / ws == cb / ws;
                let same_region = shift == 0 || (wraps(ra, rows) == wraps(rb, rows) && wraps(ca, cols) == wraps(cb, cols));
                if same_window && same_region {
                    let qk: f64 = (0..hd).map(|d| project(a, h * hd + d) * project(b, dim + h * hd + d)).sum();
                    let (ia, ib) = ((ra % ws) * ws + ca % ws, (rb % ws) * ws + cb % ws);
                    *slot = qk / (hd as f64).sqrt() + bias[(h * n + ia) * n + ib];
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            for b in 0..l {
                let want = (logits[b] - m).exp() / z;
                let have = got[0][h][a][b];
                if want == 0.0 && have != 0.0 {
                    leaks += 1;
                }
                max_diff = max_diff.max((want - have).abs());
            }
        }
    }
    Ok((max_diff, leaks))
}

/// Latent and reconstruction shapes of the default codec on 32×32 input.
pub fn codec_shapes() -> Result<((usize, usize, usize, usize), Vec<usize>), String> {
    let codec = SemanticCodec::new(CodecConfig::default(), &ParamStore::new(1), DType::F32, &Device::Cpu).map_err(e)?;
    let img = random_images(2, 32, 3);
    let latent = codec.encode(&img, 10.0).map_err(e)?;
    let back = codec.decode(&latent, 10.0).map_err(e)?;
    Ok((latent.dims(), back.pixels().dims().to_vec()))
}

// ---------------------------------------------------------------- metrics

pub fn psnr_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]) * (a[i] - b[i]);
    }
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

/// SSIM with a direct two-dimensional 11×11 Gaussian window (σ = 1.5),
/// valid positions only, channels averaged. Pixels interleaved `H × W × 3`.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = 11usize;
    let mut win = vec![0.0; k * k];
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i * k + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += win[i * k + j];
        }
    }
    for v in &mut win {
        *v /= total;
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut per_channel = 0.0;
    for ch in 0..3 {
        let px = |img: &[f64], y: usize, x: usize| img[(y * w + x) * 3 + ch];
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let g = win[i * k + j];
                        let (va, vb) = (px(a, y0 + i, x0 + j), px(b, y0 + i, x0 + j));
                        ma += g * va;
                        mb += g * vb;
                        saa += g * va * va;
                        sbb += g * vb * vb;
                        sab += g * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        per_channel += sum / count as f64;
    }
    per_channel / 3.0
}

/// Largest deviation of the library PSNR/SSIM from the oracles on random
/// pairs, and whether `ssim(a, a) = 1` and PSNR symmetry hold exactly.
pub fn metric_oracles() -> Result<(f64, f64, bool, bool), String> {
    let a = random_images(4, 32, 61);
    let b = random_images(4, 32, 62);
    let (va, vb) = (a.to_vec_f64().map_err(e)?, b.to_vec_f64().map_err(e)?);
    let per = 32 * 32 * 3;
    let p = psnr_per_image(&a, &b, 1.0).map_err(e)?;
    let s = ssim_per_image(&a, &b).map_err(e)?;
    let mut dp: f64 = 0.0;
    let mut ds: f64 = 0.0;
    for i in 0..4 {
        let (x, y) = (&va[i * per..(i + 1) * per], &vb[i * per..(i + 1) * per]);
        dp = dp.max((p[i] - psnr_oracle(x, y)).abs());
        ds = ds.max((s[i] - ssim_oracle(x, y, 32, 32)).abs());
    }
    let self_ssim = ssim_per_image(&a, &a).map_err(e)?.iter().all(|v| *v == 1.0);
    let symmetric = psnr_per_image(&b, &a, 1.0).map_err(e)? == p;
    Ok((dp, ds, self_ssim, symmetric))
}

// --------------------------------------------------------------- baseline

/// Noise-free baseline output against a plain JPEG round trip, byte for byte.
pub fn baseline_noiseless(count: usize) -> Result<usize, String> {
    let base = ClassicalBaseline::new(BaselineConfig::default()).map_err(e)?;
    let imgs = random_images(count, 32, 71);
    let spec = ChannelSpec {
        kind: ChannelKind::Awgn,
        snr_db: f64::INFINITY,
        mask_density: 1.0,
    };
    let out = base.transmit(&imgs, &spec, 3).map_err(e)?;
    let mut mismatches = 0;
    for i in 0..count {
        let one = imgs.image(i).map_err(e)?;
        let bits = jpeg_encode(&one, base.config().jpeg_quality).map_err(e)?;
        let reference = jpeg_decode(&bits, 32, 32, DType::F32, &Device::Cpu).map_err(e)?;
        if out.images.to_rgb8(i).map_err(e)? != reference.to_rgb8(0).map_err(e)? || !out.ok[i] {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

fn gf2_syndrome_zero(h: &[Vec<u8>], word: &[u8]) -> bool {
    h.iter().all(|row| row.iter().zip(word).filter(|(a, b)| **a == 1 && **b == 1).count() % 2 == 0)
}

/// `H·c = 0` for the codeword of every unit message (so, by linearity, for
/// all codewords) and for random messages; encoding is linear.
pub fn parity_identity(code: &LdpcCode) -> Result<usize, String> {
    let h = code.parity_check_matrix();
    let k = code.k();
    let mut bad = 0;
    for i in 0..k {
        let mut m = vec![0u8; k];
        m[i] = 1;
        let c = code.encode(&Bitstream::new(m).map_err(e)?).map_err(e)?;
        bad += usize::from(!gf2_syndrome_zero(&h, c.bits()));
    }
    let mut r = rng(81);
    for _ in 0..20 {
        let a: Vec<u8> = (0..k).map(|_| r.random_range(0..2)).collect();
        let b: Vec<u8> = (0..k).map(|_| r.random_range(0..2)).collect();
        let ab: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x ^ y).collect();
        let enc = |m: Vec<u8>| code.encode(&Bitstream::new(m).unwrap()).unwrap().into_bits();
        let (ca, cb, cab) = (enc(a), enc(b), enc(ab));
        let sum: Vec<u8> = ca.iter().zip(&cb).map(|(x, y)| x ^ y).collect();
        bad += usize::from(sum != cab || !gf2_syndrome_zero(&h, &ca));
    }
    Ok(bad)
}

/// Flips each of `positions` bits of a random codeword in turn (one wrong-sign
/// LLR of the same magnitude as the rest) and counts failed corrections.
pub fn single_bit_errors(code: &LdpcCode, positions: usize) -> Result<usize, String> {
    let mut r = rng(91);
    let msg: Vec<u8> = (0..code.k()).map(|_| r.random_range(0..2)).collect();
    let cw = code.encode(&Bitstream::new(msg.clone()).map_err(e)?).map_err(e)?.into_bits();
    let llr: Vec<f64> = cw.iter().map(|b| if *b == 0 { 4.0 } else { -4.0 }).collect();
    let mut failures = 0;
    for p in 0..positions.min(code.n()) {
        let mut noisy = llr.clone();
        noisy[p] = -noisy[p];
        let (decoded, ok) = code.decode(&noisy, 50).map_err(e)?;
        if !ok || decoded.bits() != msg.as_slice() {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Frame error rate of QPSK + LDPC over AWGN at `snr_db`.
pub fn frame_error_rate(code: &LdpcCode, snr_db: f64, frames: usize) -> Result<f64, String> {
    let mut r = rng(101);
    let mut failed = 0;
    for f in 0..frames {
        let msg: Vec<u8> = (0..code.k()).map(|_| r.random_range(0..2)).collect();
        let cw = code.encode(&Bitstream::new(msg.clone()).map_err(e)?).map_err(e)?;
        let x = SymbolVector::from_interleaved(modulate_interleaved(&cw).map_err(e)?, &Device::Cpu).map_err(e)?;
        let y = awgn(&x, snr_db, 1000 + f as u64).map_err(e)?;
        let llr = qam_demodulate(&y, 0, gensc_core::channel::noise_variance(snr_db)).map_err(e)?;
        let (decoded, ok) = code.decode(&llr, 50).map_err(e)?;
        if !ok || decoded.bits() != msg.as_slice() {
            failed += 1;
        }
    }
    Ok(failed as f64 / frames as f64)
}
