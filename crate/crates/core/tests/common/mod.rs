//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use loraserve::engine::lora_loss_and_grad;
use loraserve::kernels::{KernelMode, MappingMatrix};
use loraserve::retriever::{contrastive_step, EncoderGrads, UNK_TOKEN};
use loraserve::{BackboneModel, DenseTensor, Encoder, LoraAdapter, Registry, RegistrySnapshot};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random kernel inputs kept as nested vectors so the oracle never touches the
/// library's tensor code.
#[derive(Debug, Clone)]
pub struct KernelCase {
    pub b: usize,
    pub l: usize,
    pub d: usize,
    pub r: usize,
    pub p: usize,
    /// `x[b][l][d]`
    pub x: Vec<Vec<Vec<f64>>>,
    /// `a[p][r][d]`
    pub a: Vec<Vec<Vec<f64>>>,
    /// `bm[p][d][r]`
    pub bm: Vec<Vec<Vec<f64>>>,
    pub scale: Vec<f64>,
    /// Columns routed to each sample (uniform weights).
    pub routes: Vec<Vec<usize>>,
}

fn normal3<R: Rng>(rng: &mut R, n0: usize, n1: usize, n2: usize) -> Vec<Vec<Vec<f64>>> {
    (0..n0)
        .map(|_| (0..n1).map(|_| (0..n2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
        .collect()
}

fn flat3(v: &[Vec<Vec<f64>>]) -> Vec<f64> {
    v.iter().flatten().flatten().copied().collect()
}

impl KernelCase {
    /// `b <= 8, l <= 16, d <= 64, r <= 8, p <= 16, k <= 4`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.random_range(1..=8);
        let l = rng.random_range(1..=16);
        let d = rng.random_range(1..=64);
        let r = rng.random_range(1..=8);
        let p = rng.random_range(1..=16);
        let k_max = p.min(4);
        let routes = (0..b)
            .map(|_| {
                let k = rng.random_range(1..=k_max);
                let mut cols = sample(&mut rng, p, k).into_vec();
                cols.sort_unstable();
                cols
            })
            .collect();
        Self {
            b,
            l,
            d,
            r,
            p,
            x: normal3(&mut rng, b, l, d),
            a: normal3(&mut rng, p, r, d),
            bm: normal3(&mut rng, p, d, r),
            scale: (0..p).map(|_| rng.random_range(0.5..3.0)).collect(),
            routes,
        }
    }

    pub fn x_tensor(&self) -> DenseTensor {
        DenseTensor::new(vec![self.b, self.l, self.d], flat3(&self.x)).unwrap()
    }

    pub fn a_tensor(&self) -> DenseTensor {
        DenseTensor::new(vec![self.p, self.r, self.d], flat3(&self.a)).unwrap()
    }

    pub fn b_tensor(&self) -> DenseTensor {
        DenseTensor::new(vec![self.p, self.d, self.r], flat3(&self.bm)).unwrap()
    }

    pub fn mapping(&self) -> MappingMatrix {
        MappingMatrix::uniform(self.p, &self.routes).unwrap()
    }

    /// Plain-loop reference. Mixture averages `s_j B_j A_j x`; fusion applies
    /// `mean(s_j B_j) · mean(A_j)` to `x`.
    pub fn reference(&self, mode: KernelMode) -> Vec<f64> {
        let (d, r) = (self.d, self.r);
        let mut out = Vec::with_capacity(self.b * self.l * d);
        for (bi, cols) in self.routes.iter().enumerate() {
            let n = cols.len() as f64;
            let mut fa = vec![vec![0.0; d]; r];
            let mut fb = vec![vec![0.0; r]; d];
            if mode == KernelMode::Fusion {
                for &j in cols {
                    for k in 0..r {
                        for c in 0..d {
                            fa[k][c] += self.a[j][k][c] / n;
                            fb[c][k] += self.scale[j] * self.bm[j][c][k] / n;
                        }
                    }
                }
            }
            for xs in &self.x[bi] {
                let mut row = vec![0.0; d];
                let mut apply = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>, w: f64| {
                    let ax: Vec<f64> = (0..r).map(|k| (0..d).map(|c| a[k][c] * xs[c]).sum()).collect();
                    for (o, v) in row.iter_mut().enumerate() {
                        *v += w * (0..r).map(|k| b[o][k] * ax[k]).sum::<f64>();
                    }
                };
                match mode {
                    KernelMode::Mixture => {
                        for &j in cols {
                            apply(&self.a[j], &self.bm[j], self.scale[j] / n);
                        }
                    }
                    KernelMode::Fusion => apply(&fa, &fb, 1.0),
                }
                out.extend(row);
            }
        }
        out
    }
}

/// `max |got - want| / max |want|`.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let diff = got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub const FD_STEP: f64 = 1e-5;

/// `‖analytic - numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)` over a whole gradient.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = max_abs_diff(analytic, numeric);
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

fn central<F: FnMut(f64) -> f64>(x0: f64, mut f: F) -> f64 {
    (f(x0 + FD_STEP) - f(x0 - FD_STEP)) / (2.0 * FD_STEP)
}

/// Contrastive-step gradient vs central differences on a random encoder with
/// `V <= 50, h <= 8, e <= 8`. Returns the worst of the token-table and
/// projection relative errors.
pub fn encoder_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = rng.random_range(6..=50);
    let h = rng.random_range(2..=8);
    let e = rng.random_range(2..=8);
    let vocab: Vec<String> = std::iter::once(UNK_TOKEN.to_string())
        .chain((1..v).map(|i| format!("w{i}")))
        .collect();
    let table = DenseTensor::random_normal(&[v, h], 1.0, &mut rng);
    let proj = DenseTensor::random_normal(&[h, e], 1.0, &mut rng);
    let mut enc = Encoder::from_parts(vocab, table, proj, seed).unwrap();
    let seq = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let n = rng.random_range(1..=5);
        (0..n).map(|_| rng.random_range(0..v)).collect()
    };
    let anchor = seq(&mut rng);
    let positive = seq(&mut rng);
    let negatives: Vec<Vec<usize>> = (0..rng.random_range(1..=4)).map(|_| seq(&mut rng)).collect();
    let gamma = rng.random_range(0.3..1.0);

    let mut grads = EncoderGrads::default();
    contrastive_step(&enc, &anchor, &positive, &negatives, gamma, &mut grads).unwrap();
    let loss = |enc: &Encoder| {
        let mut scratch = EncoderGrads::default();
        contrastive_step(enc, &anchor, &positive, &negatives, gamma, &mut scratch).unwrap()
    };

    let mut analytic_t = Vec::new();
    let mut numeric_t = Vec::new();
    for row in 0..v {
        for c in 0..h {
            let idx = row * h + c;
            let x0 = enc.token_table().data()[idx];
            numeric_t.push(central(x0, |x| {
                enc.token_table_mut().data_mut()[idx] = x;
                let l = loss(&enc);
                enc.token_table_mut().data_mut()[idx] = x0;
                l
            }));
            analytic_t.push(grads.token_rows.get(&row).map_or(0.0, |g| g[c]));
        }
    }
    let mut numeric_p = Vec::new();
    for idx in 0..h * e {
        let x0 = enc.projection().data()[idx];
        numeric_p.push(central(x0, |x| {
            enc.projection_mut().data_mut()[idx] = x;
            let l = loss(&enc);
            enc.projection_mut().data_mut()[idx] = x0;
            l
        }));
    }
    grad_rel_err(&analytic_t, &numeric_t).max(grad_rel_err(&grads.projection, &numeric_p))
}

fn factor(a: &mut LoraAdapter, layer: usize, which: usize) -> &mut [f64] {
    let layer = &mut a.layers[layer];
    if which == 0 { layer.a.data_mut() } else { layer.b.data_mut() }
}

/// LoRA trainer gradient vs central differences on a 2-layer backbone with
/// `d <= 8, r <= 2`. Returns the worst relative error over all A and B factors.
pub fn lora_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=8);
    let r = rng.random_range(1..=2);
    let n = rng.random_range(2..=6);
    let model = BackboneModel::near_identity(d, 2, 0.4, 0.2, &mut rng).unwrap();
    let mut adapter = LoraAdapter::random("g", "g", d, 2, r, 2.0 * r as f64, 0.5, vec!["s".into()], &mut rng);
    let x = DenseTensor::random_normal(&[n, d], 1.0, &mut rng);
    let y = DenseTensor::random_normal(&[n, d], 1.0, &mut rng);
    let (_, grads) = lora_loss_and_grad(&model, &adapter, &x, &y).unwrap();

    let loss = |a: &LoraAdapter| lora_loss_and_grad(&model, a, &x, &y).unwrap().0;
    let mut worst = 0.0f64;
    for li in 0..2 {
        for which in 0..2 {
            let len = if which == 0 { adapter.layers[li].a.len() } else { adapter.layers[li].b.len() };
            let mut numeric = Vec::with_capacity(len);
            for idx in 0..len {
                let x0 = factor(&mut adapter, li, which)[idx];
                numeric.push(central(x0, |v| {
                    factor(&mut adapter, li, which)[idx] = v;
                    let l = loss(&adapter);
                    factor(&mut adapter, li, which)[idx] = x0;
                    l
                }));
            }
            let analytic = if which == 0 { grads[li].a.data() } else { grads[li].b.data() };
            worst = worst.max(grad_rel_err(analytic, &numeric));
        }
    }
    worst
}

/// Adapters keyed by id with the given ranks, all on one backbone width.
pub fn random_pool(d: usize, depth: usize, ranks: &[usize], seed: u64) -> BTreeMap<String, LoraAdapter> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let id = format!("a{i:02}");
            let a = LoraAdapter::random(&id, "t", d, depth, r, 2.0 * r as f64, 0.3, vec![format!("sample {i}")], &mut rng);
            (id, a)
        })
        .collect()
}

type AdapterBits = (String, String, usize, u64, Vec<String>, Vec<(Vec<usize>, Vec<u64>)>);

fn adapter_bits(a: &LoraAdapter) -> AdapterBits {
    let layers = a
        .layers
        .iter()
        .flat_map(|l| [&l.a, &l.b])
        .map(|t| (t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    (a.id.clone(), a.task_tag.clone(), a.rank, a.alpha.to_bits(), a.representative_samples.clone(), layers)
}

/// Mismatches between two snapshots, compared field by field on raw bits.
pub fn snapshot_bit_mismatches(x: &RegistrySnapshot, y: &RegistrySnapshot) -> usize {
    let mut bad = usize::from(x.version() != y.version())
        + usize::from(x.d() != y.d())
        + usize::from(x.num_layers() != y.num_layers())
        + usize::from(x.ids() != y.ids());
    for (a, b) in x.adapters().zip(y.adapters()) {
        bad += usize::from(adapter_bits(a) != adapter_bits(b));
    }
    bad
}

fn dir_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

/// Saves a random heterogeneous-rank pool with awkward alphas, loads it back and
/// saves again. Counts every bit-level difference.
pub fn registry_round_trip_violations(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=12);
    let depth = rng.random_range(1..=3);
    let n = rng.random_range(1..=8);
    let registry = Registry::new(d, depth);
    for i in 0..n {
        let r = rng.random_range(1..=4);
        let alpha = rng.random_range(0.01..50.0);
        let samples = (0..rng.random_range(1..=3)).map(|j| format!("sample {i}.{j} \"quoted\" ü")).collect();
        let mut a = LoraAdapter::random(format!("ad{i}"), format!("tag{}", i % 3), d, depth, r, alpha, 1.0, samples, &mut rng);
        // exercise subnormals, signed zero and extremes
        a.layers[0].a.data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        a.layers[0].b.data_mut()[0] = -0.0;
        if let Some(v) = a.layers[0].b.data_mut().get_mut(1) {
            *v = f64::MAX;
        }
        registry.register(a).unwrap();
    }
    let snap = registry.snapshot();
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    snap.save(first.path()).unwrap();
    let loaded = RegistrySnapshot::load(first.path()).unwrap();
    loaded.save(second.path()).unwrap();
    snapshot_bit_mismatches(&snap, &loaded)
        + usize::from(snap.checksum() != loaded.checksum())
        + usize::from(dir_bytes(first.path()) != dir_bytes(second.path()))
}

/// Takes a snapshot, then hammers the registry from several writer threads
/// while readers keep checking the snapshot. Counts any change seen in it, and
/// any non-increasing version returned to a writer.
pub fn snapshot_isolation_violations(seed: u64) -> usize {
    let d = 4;
    let registry = Registry::new(d, 2);
    for a in random_pool(d, 2, &[1, 2, 3], seed).into_values() {
        registry.register(a).unwrap();
    }
    let snap = registry.snapshot();
    let frozen = (*snap).clone();
    let checksum = snap.checksum();
    let violations = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|s| {
        for w in 0..4u64 {
            let registry = &registry;
            let violations = &violations;
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (w + 1));
                let mut last = 0;
                for i in 0..25 {
                    let id = format!("w{w}_{i}");
                    let a = LoraAdapter::random(&id, "t", d, 2, 2, 4.0, 0.5, vec!["s".into()], &mut rng);
                    for v in [registry.register(a).unwrap(), registry.remove(if i % 2 == 0 { &id } else { "a00" }).unwrap_or(0)] {
                        if v != 0 && v <= last {
                            violations.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        }
                        last = last.max(v);
                    }
                }
            });
        }
        for _ in 0..2 {
            let snap = &snap;
            let frozen = &frozen;
            let violations = &violations;
            s.spawn(move || {
                for _ in 0..50 {
                    let bad = snapshot_bit_mismatches(snap, frozen) + usize::from(snap.checksum() != checksum);
                    violations.fetch_add(bad, std::sync::atomic::Ordering::Relaxed);
                }
            });
        }
    });
    let after = snapshot_bit_mismatches(&snap, &frozen) + usize::from(snap.checksum() != checksum);
    violations.into_inner() + after + usize::from(registry.version() <= snap.version())
}
