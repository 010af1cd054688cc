//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use dynlora::model::{GlyphTransformer, GlyphTransformerConfig, ParamKey};
use dynlora::{AdapterTargets, DynLoraAdapter, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values in `±[0.1, 1]`, away from the relu kink.
pub fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Central-difference check of `build` at `inputs`. The scalar probed is
/// `Σ out ⊙ R` for a fixed random `R` (or `out` itself when scalar).
/// Returns the largest relative error over every input coordinate.
pub fn grad_check(inputs: &[Tensor<f64>], build: &Build<'_>, seed: u64) -> f64 {
    let probe = |ins: &[Tensor<f64>]| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(&t.clone().with_requires_grad(true))).collect();
        let out = build(&mut g, &vars).unwrap();
        let n = g.value(out).len();
        let loss = if n == 1 {
            out
        } else {
            let mut r = rng(seed ^ 0xabcd);
            let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let w = g.constant(g.shape(out).to_vec(), w).unwrap();
            let p = g.mul(out, w).unwrap();
            g.sum(p)
        };
        let value = g.value(loss)[0];
        let grads = g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .zip(ins)
            .map(|(v, t)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        (value, Some(gs))
    };
    let (_, analytic) = probe(inputs);
    let analytic = analytic.unwrap();
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let (up, _) = probe(&work);
            work[k].data_mut()[i] = orig - FD_STEP;
            let (dn, _) = probe(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - dn) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    worst
}

pub struct OpCase {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn dims(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(1..5)).collect()
}

/// Every differentiable graph op on random shapes drawn from `seed`.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 3);
                let ins = [uniform(&[d[0], d[1]], -1.0, 1.0, &mut r), uniform(&[d[1], d[2]], -1.0, 1.0, &mut r)];
                grad_check(&ins, &|g, v| g.matmul(v[0], v[1]), s)
            },
        },
        OpCase {
            name: "matmul_nt",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 3);
                let ins = [uniform(&[d[0], d[1]], -1.0, 1.0, &mut r), uniform(&[d[2], d[1]], -1.0, 1.0, &mut r)];
                grad_check(&ins, &|g, v| g.matmul_nt(v[0], v[1]), s)
            },
        },
        OpCase {
            name: "batch_matmul",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 4);
                let ins = [
                    uniform(&[d[0], d[1], d[2]], -1.0, 1.0, &mut r),
                    uniform(&[d[0], d[2], d[3]], -1.0, 1.0, &mut r),
                ];
                grad_check(&ins, &|g, v| g.batch_matmul(v[0], v[1], false), s)
            },
        },
        OpCase {
            name: "batch_matmul_nt",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 4);
                let ins = [
                    uniform(&[d[0], d[1], d[2]], -1.0, 1.0, &mut r),
                    uniform(&[d[0], d[3], d[2]], -1.0, 1.0, &mut r),
                ];
                grad_check(&ins, &|g, v| g.batch_matmul(v[0], v[1], true), s)
            },
        },
        OpCase {
            name: "add",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 2);
                let ins = [uniform(&d, -1.0, 1.0, &mut r), uniform(&d, -1.0, 1.0, &mut r)];
                grad_check(&ins, &|g, v| g.add(v[0], v[1]), s)
            },
        },
        OpCase {
            name: "sub",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 2);
                let ins = [uniform(&d, -1.0, 1.0, &mut r), uniform(&d, -1.0, 1.0, &mut r)];
                grad_check(&ins, &|g, v| g.sub(v[0], v[1]), s)
            },
        },
        OpCase {
            name: "mul",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 2);
                let ins = [uniform(&d, -1.0, 1.0, &mut r), uniform(&d, -1.0, 1.0, &mut r)];
                grad_check(&ins, &|g, v| g.mul(v[0], v[1]), s)
            },
        },
        OpCase {
            name: "mul_scalar",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 2);
                let k = r.random_range(-2.0..2.0);
                grad_check(&[uniform(&d, -1.0, 1.0, &mut r)], &|g, v| Ok(g.mul_scalar(v[0], k)), s)
            },
        },
        OpCase {
            name: "gelu",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 2);
                grad_check(&[uniform(&d, -3.0, 3.0, &mut r)], &|g, v| Ok(g.gelu(v[0])), s)
            },
        },
        OpCase {
            name: "relu",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 2);
                grad_check(&[off_zero(&d, &mut r)], &|g, v| Ok(g.relu(v[0])), s)
            },
        },
        OpCase {
            name: "softmax",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 3);
                grad_check(&[uniform(&d, -2.0, 2.0, &mut r)], &|g, v| g.softmax(v[0]), s)
            },
        },
        OpCase {
            name: "layernorm",
            run: |s| {
                let mut r = rng(s);
                let n = r.random_range(1..4);
                let d = r.random_range(2..6);
                let ins = [
                    uniform(&[n, d], -2.0, 2.0, &mut r),
                    uniform(&[d], 0.5, 1.5, &mut r),
                    uniform(&[d], -0.5, 0.5, &mut r),
                ];
                grad_check(&ins, &|g, v| g.layernorm(v[0], v[1], v[2], 1e-5), s)
            },
        },
        OpCase {
            name: "cross_entropy",
            run: |s| {
                let mut r = rng(s);
                let b = r.random_range(1..5);
                let c = r.random_range(2..6);
                let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
                let ins = [uniform(&[b, c], -3.0, 3.0, &mut r)];
                grad_check(&ins, &|g, v| g.cross_entropy(v[0], &labels), s)
            },
        },
        OpCase {
            name: "scale_cols",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 2);
                let ins = [uniform(&d, -1.0, 1.0, &mut r), uniform(&[d[1]], -1.0, 1.0, &mut r)];
                grad_check(&ins, &|g, v| g.scale_cols(v[0], v[1]), s)
            },
        },
        OpCase {
            name: "add_row",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 2);
                let ins = [uniform(&d, -1.0, 1.0, &mut r), uniform(&[d[1]], -1.0, 1.0, &mut r)];
                grad_check(&ins, &|g, v| g.add_row(v[0], v[1]), s)
            },
        },
        OpCase {
            name: "add_tiled",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 3);
                let ins = [
                    uniform(&[d[0] * d[1], d[2]], -1.0, 1.0, &mut r),
                    uniform(&[d[1], d[2]], -1.0, 1.0, &mut r),
                ];
                grad_check(&ins, &|g, v| g.add_tiled(v[0], v[1]), s)
            },
        },
        OpCase {
            name: "split_heads",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 4);
                let (b, seq, h, dh) = (d[0], d[1], d[2], d[3]);
                let ins = [uniform(&[b * seq, h * dh], -1.0, 1.0, &mut r)];
                grad_check(&ins, &|g, v| g.split_heads(v[0], b, h), s)
            },
        },
        OpCase {
            name: "merge_heads",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 4);
                let (b, seq, h, dh) = (d[0], d[1], d[2], d[3]);
                let ins = [uniform(&[b * h, seq, dh], -1.0, 1.0, &mut r)];
                grad_check(&ins, &|g, v| g.merge_heads(v[0], b, h), s)
            },
        },
        OpCase {
            name: "mean_groups",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 3);
                let ins = [uniform(&[d[0] * d[1], d[2]], -1.0, 1.0, &mut r)];
                grad_check(&ins, &|g, v| g.mean_groups(v[0], d[0]), s)
            },
        },
        OpCase {
            name: "sum",
            run: |s| {
                let mut r = rng(s);
                let d = dims(&mut r, 2);
                grad_check(&[uniform(&d, -1.0, 1.0, &mut r)], &|g, v| Ok(g.sum(v[0])), s)
            },
        },
        OpCase {
            name: "adapter",
            run: |s| adapter_grad_check(s).0,
        },
    ]
}

/// Random adapter with nonzero `b` and mixed `w`, one pruned direction.
pub fn random_adapter(d_out: usize, d_in: usize, r_max: usize, seed: u64) -> DynLoraAdapter<f64> {
    let mut r = rng(seed);
    let base = uniform(&[d_out, d_in], -1.0, 1.0, &mut r);
    let a = uniform(&[r_max, d_in], -1.0, 1.0, &mut r);
    let b = uniform(&[d_out, r_max], -1.0, 1.0, &mut r);
    let w = uniform(&[r_max], -1.5, 1.5, &mut r);
    let mut active = vec![true; r_max];
    if r_max > 1 {
        active[r.random_range(0..r_max)] = false;
    }
    DynLoraAdapter::from_parts(base, a, b, w, active, 16.0).unwrap()
}

/// FD check of the adapter's factored forward against in-place
/// perturbation of its own tensors. Returns (max relative error over a, b
/// and w, the same over w alone).
pub fn adapter_grad_check(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (d_out, d_in, rank) = (r.random_range(2..6), r.random_range(2..6), r.random_range(2..6));
    let mut ad = random_adapter(d_out, d_in, rank, seed);
    let x = uniform(&[3, d_in], -1.0, 1.0, &mut r);
    let probe: Vec<f64> = (0..3 * d_out).map(|_| r.random_range(-1.0..1.0)).collect();
    let loss = |ad: &DynLoraAdapter<f64>| -> (f64, [Vec<f64>; 3]) {
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let (y, vars) = ad.forward(&mut g, xv).unwrap();
        let pv = g.constant(vec![3, d_out], probe.clone()).unwrap();
        let p = g.mul(y, pv).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        let get = |v: Var| grads.get(v).expect("adapter part receives gradient").to_vec();
        (g.value(l)[0], [get(vars.a), get(vars.b), get(vars.w)])
    };
    let (_, analytic) = loss(&ad);
    let mut worst = [0.0f64; 3];
    for (part, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = part_mut(&mut ad, part)[i];
            part_mut(&mut ad, part)[i] = orig + FD_STEP;
            let (up, _) = loss(&ad);
            part_mut(&mut ad, part)[i] = orig - FD_STEP;
            let (dn, _) = loss(&ad);
            part_mut(&mut ad, part)[i] = orig;
            worst[part] = worst[part].max(rel_err(a, (up - dn) / (2.0 * FD_STEP)));
        }
    }
    (worst.iter().copied().fold(0.0, f64::max), worst[2])
}

fn part_mut(ad: &mut DynLoraAdapter<f64>, part: usize) -> &mut [f64] {
    match part {
        0 => ad.a_mut().data_mut(),
        1 => ad.b_mut().data_mut(),
        _ => ad.w_mut().data_mut(),
    }
}

pub fn micro_config() -> GlyphTransformerConfig {
    GlyphTransformerConfig {
        image_side: 8,
        patch_side: 4,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        n_classes: 3,
        ..GlyphTransformerConfig::default()
    }
}

/// End-to-end FD check of the cross-entropy loss of a 2-layer, width-8
/// model with adapters on every projection and every tensor trainable.
pub fn micro_model_check(seed: u64) -> f64 {
    let cfg = micro_config();
    let mut model = GlyphTransformer::<f64>::init(cfg, seed).unwrap();
    model.attach_adapters(AdapterTargets::default(), 2, 16.0, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for (_, _, ad) in model.adapters_mut() {
        for v in ad.b_mut().data_mut() {
            *v = r.random_range(-0.3..0.3);
        }
    }
    model.set_backbone_trainable(true);
    let batch = 2;
    let pixels: Vec<f64> = (0..batch * cfg.pixels()).map(|_| r.random_range(0.0..1.0)).collect();
    let labels = [0usize, 2];

    let loss = |m: &GlyphTransformer<f64>| -> f64 {
        let mut g = Graph::new();
        let fw = m.forward(&mut g, &pixels, batch).unwrap();
        let l = g.cross_entropy(fw.logits, &labels).unwrap();
        g.value(l)[0]
    };
    {
        let mut g = Graph::new();
        let fw = model.forward(&mut g, &pixels, batch).unwrap();
        let l = g.cross_entropy(fw.logits, &labels).unwrap();
        let grads = g.backward(l).unwrap();
        model.accumulate_grads(&grads, &fw.bindings).unwrap();
    }
    let mut keys = Vec::new();
    model.visit(|k, t| {
        if t.requires_grad() {
            keys.push(k);
        }
    });
    let mut worst = 0.0f64;
    for key in keys {
        let analytic: Vec<f64> = model.tensor(key).unwrap().grad().unwrap().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = model.tensor(key).unwrap().data()[i];
            set(&mut model, key, i, orig + FD_STEP);
            let up = loss(&model);
            set(&mut model, key, i, orig - FD_STEP);
            let dn = loss(&model);
            set(&mut model, key, i, orig);
            worst = worst.max(rel_err(a, (up - dn) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn set(model: &mut GlyphTransformer<f64>, key: ParamKey, i: usize, v: f64) {
    model.tensor_mut(key).unwrap().data_mut()[i] = v;
}

/// Spectral norm of a matrix by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Tensor<f64>) -> f64 {
    let (rows, cols) = m.dims2().unwrap();
    let d = m.data();
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..500 {
        let mv: Vec<f64> = (0..rows).map(|i| (0..cols).map(|j| d[i * cols + j] * v[j]).sum()).collect();
        let mut w: Vec<f64> = (0..cols).map(|j| (0..rows).map(|i| d[i * cols + j] * mv[i]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        w.iter_mut().for_each(|x| *x /= norm);
        let next = norm.sqrt();
        v = w;
        if (next - sigma).abs() <= 1e-14 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

/// Random GLY1 contents: any sizes, labels below the class count.
pub fn random_dataset(r: &mut ChaCha8Rng) -> dynlora::glyphgen::GlyphDataset {
    let count = r.random_range(0..20);
    let height = r.random_range(1..12);
    let width = r.random_range(1..12);
    let n_classes = r.random_range(1..400usize);
    dynlora::glyphgen::GlyphDataset {
        family: r.random(),
        n_classes,
        height,
        width,
        labels: (0..count).map(|_| r.random_range(0..n_classes) as u16).collect(),
        pixels: (0..count * height * width).map(|_| r.random()).collect(),
    }
}

/// Random DLRA contents: arbitrary names (including non-ASCII), dtypes,
/// ranks 0 to 4 and raw bit patterns (NaNs included).
pub fn random_checkpoint(r: &mut ChaCha8Rng) -> dynlora::checkpoint::Checkpoint {
    use dynlora::checkpoint::{Checkpoint, Payload};
    const ALPHABET: &[char] = &['a', 'z', '.', '_', '0', '9', 'λ', 'é', '字'];
    let mut ck = Checkpoint::new();
    let n = r.random_range(0..8);
    for i in 0..n {
        let len = r.random_range(0..12);
        let mut name: String = (0..len).map(|_| ALPHABET[r.random_range(0..ALPHABET.len())]).collect();
        name.push_str(&format!("#{i}"));
        let ndim = r.random_range(0..5);
        let dims: Vec<usize> = (0..ndim).map(|_| r.random_range(0..5)).collect();
        let numel: usize = dims.iter().product();
        let payload = match r.random_range(0..3) {
            0 => Payload::F32((0..numel).map(|_| f32::from_bits(r.random())).collect()),
            1 => Payload::F64((0..numel).map(|_| f64::from_bits(r.random())).collect()),
            _ => Payload::U8((0..numel).map(|_| r.random()).collect()),
        };
        ck.push(name, dims, payload).unwrap();
    }
    ck
}

/// Header corruptions that must be rejected: every truncation inside the
/// header, each magic byte flipped, and oversized count/dimension fields.
pub fn gly1_bad_headers(bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut cases: Vec<Vec<u8>> = (0..21.min(bytes.len())).map(|n| bytes[..n].to_vec()).collect();
    for i in 0..4 {
        let mut b = bytes.to_vec();
        b[i] ^= 0x20;
        cases.push(b);
    }
    // Image dimensions are only checkable when there is at least one image.
    let fields: &[usize] = if bytes.len() > 21 { &[4, 8, 12] } else { &[4] };
    for &field in fields {
        let mut b = bytes.to_vec();
        b[field..field + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        cases.push(b);
    }
    if bytes.len() > 21 {
        // Zero classes puts every stored label out of range.
        let mut b = bytes.to_vec();
        b[16..20].copy_from_slice(&0u32.to_le_bytes());
        cases.push(b);
    }
    cases
}

pub fn dlra_bad_headers(bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut cases: Vec<Vec<u8>> = (0..12).map(|n| bytes[..n].to_vec()).collect();
    for i in 0..8 {
        let mut b = bytes.to_vec();
        b[i] ^= 0x41;
        cases.push(b);
    }
    let mut b = bytes.to_vec();
    b[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    cases.push(b);
    cases
}

/// Decodes `bytes` with panics caught; `Err(msg)` on a panic.
pub fn decode_safely<T>(bytes: &[u8], decode: fn(&[u8]) -> dynlora::Result<T>) -> std::result::Result<dynlora::Result<T>, String> {
    std::panic::catch_unwind(|| decode(bytes)).map_err(|_| "decoder panicked".to_string())
}

pub fn is_format_error<T>(r: &dynlora::Result<T>) -> bool {
    matches!(r, Err(dynlora::Error::Format { .. }) | Err(dynlora::Error::Version { .. }))
}

/// One randomized GLY1 trial: bit-exact round trip, rejected bad headers,
/// and no panic under 16 random byte flips.
pub fn gly1_trial(seed: u64) -> std::result::Result<(), String> {
    use dynlora::glyphgen::{decode_gly1, encode_gly1};
    let mut r = rng(seed);
    let ds = random_dataset(&mut r);
    let bytes = encode_gly1(&ds).map_err(|e| e.to_string())?;
    let back = decode_gly1(&bytes).map_err(|e| format!("round trip failed: {e}"))?;
    if back != ds || encode_gly1(&back).unwrap() != bytes {
        return Err("round trip differs".into());
    }
    for bad in gly1_bad_headers(&bytes) {
        if !is_format_error(&decode_safely(&bad, decode_gly1)?) {
            return Err(format!("corrupt header of {} bytes accepted", bad.len()));
        }
    }
    for _ in 0..16 {
        let mut b = bytes.clone();
        if b.is_empty() {
            break;
        }
        let i = r.random_range(0..b.len());
        b[i] ^= r.random_range(1..=255u8);
        // Any outcome but a panic is acceptable.
        let _ = decode_safely(&b, decode_gly1)?;
    }
    Ok(())
}

pub fn dlra_trial(seed: u64) -> std::result::Result<(), String> {
    use dynlora::checkpoint::Checkpoint;
    let mut r = rng(seed);
    let ck = random_checkpoint(&mut r);
    let bytes = ck.encode().map_err(|e| e.to_string())?;
    let back = Checkpoint::decode(&bytes).map_err(|e| format!("round trip failed: {e}"))?;
    if back.encode().unwrap() != bytes || back.names().ne(ck.names()) {
        return Err("round trip differs".into());
    }
    for bad in dlra_bad_headers(&bytes) {
        if !is_format_error(&decode_safely(&bad, Checkpoint::decode)?) {
            return Err(format!("corrupt header of {} bytes accepted", bad.len()));
        }
    }
    for _ in 0..16 {
        let mut b = bytes.clone();
        let i = r.random_range(0..b.len());
        b[i] ^= r.random_range(1..=255u8);
        let _ = decode_safely(&b, Checkpoint::decode)?;
    }
    Ok(())
}
