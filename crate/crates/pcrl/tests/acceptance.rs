//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test -p pcrl --test acceptance -- 1 9`.

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use pcrl::archive::MANIFEST;
use pcrl::checkpoint::{load_checkpoint, resume, save_checkpoint, save_run_state, CheckpointMeta};
use pcrl_core::downstream::{auc, dice, label_subset, linear_probe, FinetuneConfig, ProbeConfig, ProbeTask, Segmenter};
use pcrl_core::graph::Graph;
use pcrl_core::network::{cross_mix, Decoder, Encoder, NetworkConfig, Pyramid};
use pcrl_core::nn::{Bound, NormKind, ParamKind, ParamSet};
use pcrl_core::objectives::{nce_loss, FeatureQueue, NceMode};
use pcrl_core::pretrain::{Ablation, PretrainConfig, Pretrainer};
use pcrl_core::rng::rng_for;
use pcrl_core::synthdata::{generate, Corpus, Split, SynthSpec};
use pcrl_core::transforms::{
    apply_transform, indicator_batch, Branch, CropConfig, Dims, Rotation, TransformSpec,
};
use pcrl_core::Tensor;
use rand::Rng;

type Verdict = (bool, String);

fn randn(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(n)).max(1e-12)
}

fn tiny_net(dims: Dims) -> NetworkConfig {
    NetworkConfig {
        dims,
        base_width: 4,
        stages: 2,
        embed_dim: 8,
        norm: NormKind::Group { groups: 2 },
        ..NetworkConfig::desk(dims)
    }
}

fn tiny_pretrain(ablation: Ablation, size: usize) -> PretrainConfig {
    PretrainConfig {
        network: tiny_net(Dims::Two),
        batch_size: 4,
        queue_capacity: 64,
        ablation,
        crops: CropConfig {
            out_size: [size, size, 1],
            ..CropConfig::default()
        },
        ..PretrainConfig::desk(Dims::Two)
    }
}

// 1. Contrastive loss against a direct softmax enumeration.
fn nce_oracle() -> Verdict {
    let t0 = Instant::now();
    let mut rng = rng_for(1, &[]);
    let tau = 0.2;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let q = randn(&mut rng, &[4, 8], 1.0);
        let k = randn(&mut rng, &[4, 8], 1.0);
        let queue = randn(&mut rng, &[16, 8], 1.0);
        for mode in [NceMode::QueueOnly, NceMode::QueuePlusPositive] {
            let (got, _) = nce_loss(&q, &k, &queue, tau, mode).unwrap();
            let row = |t: &Tensor<f64>, i: usize| t.data()[i * 8..(i + 1) * 8].to_vec();
            let mut want = 0.0;
            for i in 0..4 {
                let qi = row(&q, i);
                let sim = |v: Vec<f64>| qi.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / tau;
                let pos = sim(row(&k, i)).exp();
                let mut denom: f64 = (0..16).map(|j| sim(row(&queue, j)).exp()).sum();
                if mode == NceMode::QueuePlusPositive {
                    denom += pos;
                }
                want += -(pos / denom).ln();
            }
            want /= 4.0;
            worst = worst.max((got - want).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    (worst < 1e-6 && secs < 10.0, format!("max |diff| {worst:.2e} over 200 evaluations in {secs:.2}s"))
}

fn sample_coords(len: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= 40 {
        (0..len).collect()
    } else {
        (0..40).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Central differences of `f` over selected coordinates of `params[slot]`.
fn fd_params(
    params: &ParamSet<f64>,
    slot: usize,
    coords: &[usize],
    f: &dyn Fn(&ParamSet<f64>) -> f64,
) -> Vec<f64> {
    let h = 1e-6;
    coords
        .iter()
        .map(|&j| {
            let mut a = params.clone();
            a.get_mut(slot).value.data_mut()[j] += h;
            let mut b = params.clone();
            b.get_mut(slot).value.data_mut()[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn fd_input(x: &Tensor<f64>, coords: &[usize], f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    let h = 1e-6;
    coords
        .iter()
        .map(|&j| {
            let mut a = x.clone();
            a.data_mut()[j] += h;
            let mut b = x.clone();
            b.data_mut()[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn attention_grad_error(rng: &mut impl Rng) -> f64 {
    let cfg = tiny_net(Dims::Two);
    let enc = Encoder::new(&cfg).unwrap();
    let params = ParamSet::<f64>::init(enc.specs(), rng);
    let c = cfg.top_width();
    let x = randn(rng, &[2, c, 1, 3, 3], 1.0);
    let specs = [
        TransformSpec {
            flip_x: true,
            rotation: Rotation::R90,
            ..TransformSpec::identity(Dims::Two)
        },
        TransformSpec {
            flip_y: true,
            rotation: Rotation::R270,
            ..TransformSpec::identity(Dims::Two)
        },
    ];
    let ind = indicator_batch::<f64>(&specs).unwrap();
    let probe = randn(rng, &[2, c, 1, 3, 3], 1.0);
    let run = |p: &ParamSet<f64>, x: &Tensor<f64>, grads: bool| {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, p, true, true);
        let xv = g.leaf(x.clone(), true);
        let iv = g.constant(ind.clone());
        let out = enc.attend(&mut g, &b, &[xv], Some(iv)).unwrap();
        let l = g.dot_const(out, probe.clone()).unwrap();
        let value = g.value(l).item();
        let gr = grads.then(|| {
            let gs = g.backward(l);
            let mut per: Vec<Option<Vec<f64>>> = (0..p.len()).map(|i| gs.get(b.var(i)).map(<[f64]>::to_vec)).collect();
            per.push(gs.get(xv).map(<[f64]>::to_vec));
            per
        });
        (value, gr)
    };
    let (_, grads) = run(&params, &x, true);
    let grads = grads.unwrap();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (i, spec) in enc.specs().iter().enumerate() {
        if !spec.name.starts_with("transatt.") {
            continue;
        }
        let coords = sample_coords(params.get(i).value.numel(), rng);
        let a = grads[i].clone().expect("attention parameters receive gradients");
        analytic.extend(coords.iter().map(|&j| a[j]));
        numeric.extend(fd_params(&params, i, &coords, &|p| run(p, &x, false).0));
    }
    let coords = sample_coords(x.numel(), rng);
    let a = grads.last().unwrap().clone().unwrap();
    analytic.extend(coords.iter().map(|&j| a[j]));
    numeric.extend(fd_input(&x, &coords, &|x| run(&params, x, false).0));
    rel_err(&analytic, &numeric)
}

fn decoder_grad_error(rng: &mut impl Rng) -> f64 {
    let cfg = tiny_net(Dims::Two);
    let enc = Encoder::new(&cfg).unwrap();
    let dec = Decoder::new(&cfg, 1).unwrap();
    let params = ParamSet::<f64>::init(dec.specs(), rng);
    let ep = ParamSet::<f64>::init(enc.specs(), rng);
    let shapes: Vec<Vec<usize>> = {
        let mut g = Graph::new();
        let mut b = Bound::new(&mut g, &ep, false, false);
        let x = g.constant(randn(rng, &[2, 1, 1, 8, 8], 1.0));
        let levels = enc.features(&mut g, &mut b, x).unwrap();
        levels.iter().map(|&v| g.value(v).shape().to_vec()).collect()
    };
    let mut inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(rng, s, 1.0)).collect();
    inputs.push(randn(rng, shapes.last().unwrap(), 1.0));
    let target = randn(rng, &[2, 1, 1, 8, 8], 0.5).map(|v| v + 0.5);
    let run = |p: &ParamSet<f64>, inputs: &[Tensor<f64>], grads: bool| {
        let mut g = Graph::new();
        let mut b = Bound::new(&mut g, p, true, true);
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let pyr = Pyramid {
            levels: vars[..vars.len() - 1].to_vec(),
            top: *vars.last().unwrap(),
        };
        let y = dec.decode(&mut g, &mut b, &pyr).unwrap();
        let t = g.constant(target.clone());
        let l = g.mse(y, t).unwrap();
        let value = g.value(l).item();
        let gr = grads.then(|| {
            let gs = g.backward(l);
            let mut per: Vec<Vec<f64>> = (0..p.len()).map(|i| gs.get(b.var(i)).unwrap().to_vec()).collect();
            per.extend(vars.iter().map(|&v| gs.get(v).unwrap().to_vec()));
            per
        });
        (value, gr)
    };
    let grads = run(&params, &inputs, true).1.unwrap();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (i, spec) in dec.specs().iter().enumerate() {
        if spec.kind != ParamKind::Weight {
            continue;
        }
        let coords = sample_coords(params.get(i).value.numel(), rng);
        analytic.extend(coords.iter().map(|&j| grads[i][j]));
        numeric.extend(fd_params(&params, i, &coords, &|p| run(p, &inputs, false).0));
    }
    for k in 0..inputs.len() {
        let coords = sample_coords(inputs[k].numel(), rng);
        analytic.extend(coords.iter().map(|&j| grads[params.len() + k][j]));
        numeric.extend(fd_input(&inputs[k], &coords, &|x| {
            let mut v = inputs.clone();
            v[k] = x.clone();
            run(&params, &v, false).0
        }));
    }
    rel_err(&analytic, &numeric)
}

fn nce_grad_error(rng: &mut impl Rng) -> f64 {
    let q = randn(rng, &[4, 8], 0.5);
    let k = randn(rng, &[4, 8], 0.5);
    let queue = randn(rng, &[16, 8], 0.5);
    let mut worst: f64 = 0.0;
    for mode in [NceMode::QueueOnly, NceMode::QueuePlusPositive] {
        let (_, grad) = nce_loss(&q, &k, &queue, 0.2, mode).unwrap();
        let coords: Vec<usize> = (0..q.numel()).collect();
        let numeric = fd_input(&q, &coords, &|q| nce_loss(q, &k, &queue, 0.2, mode).unwrap().0);
        worst = worst.max(rel_err(grad.data(), &numeric));
    }
    worst
}

/// Largest absolute gradient reaching the momentum branch (its parameters
/// and its key) in a full forward pass with an active contrastive term.
fn momentum_side_gradient(rng: &mut impl Rng) -> (f64, bool) {
    let mut tr = Pretrainer::<f64>::new(tiny_pretrain(Ablation::Full, 8)).unwrap();
    let rows = randn(rng, &[16, 8], 1.0);
    tr.queue.push(&rows).unwrap();
    let before = tr.queue.snapshot();
    let batch = randn(rng, &[4, 1, 1, 8, 8], 0.5).map(|v| v + 0.5);
    let t = tr.make_triplet(&batch, 0, 0).unwrap();
    let pass = tr.forward(&t, true, true).unwrap();
    assert!(pass.contrastive.is_some());
    let grads = pass.graph.backward(pass.total);
    let mut worst: f64 = 0.0;
    let mut vars: Vec<_> = (0..tr.state.momentum.len()).map(|i| pass.momentum.var(i)).collect();
    vars.push(pass.key);
    vars.extend(pass.pyramids[1].levels.iter().copied());
    for v in vars {
        if let Some(d) = grads.get(v) {
            worst = worst.max(d.iter().fold(0.0, |m: f64, x| m.max(x.abs())));
        }
    }
    let ordinary_trained = (0..tr.state.ordinary.len())
        .filter_map(|i| grads.get(pass.ordinary.var(i)))
        .any(|d| d.iter().any(|&x| x != 0.0));
    (worst, ordinary_trained && tr.queue.snapshot() == before)
}

// 2. Analytic gradients against central finite differences.
fn gradient_checks() -> Verdict {
    let t0 = Instant::now();
    let mut rng = rng_for(2, &[]);
    let att = attention_grad_error(&mut rng);
    let dec = decoder_grad_error(&mut rng);
    let nce = nce_grad_error(&mut rng);
    let (mom, ord_ok) = momentum_side_gradient(&mut rng);
    let secs = t0.elapsed().as_secs_f64();
    let ok = att < 1e-4 && dec < 1e-4 && nce < 1e-4 && mom == 0.0 && ord_ok && secs < 120.0;
    (
        ok,
        format!(
            "rel err attention {att:.1e}, decoder {dec:.1e}, nce {nce:.1e}; momentum-side max |grad| {mom}; queue constant, ordinary trained: {ord_ok}; {secs:.1}s"
        ),
    )
}

// 3. Exact endpoints of mixing, EMA, and the hybrid reconstruction term.
fn endpoints() -> Verdict {
    let mut rng = rng_for(3, &[]);
    let mut notes = Vec::new();
    let mut ok = true;
    let shapes = [[2, 4, 1, 4, 4], [2, 8, 1, 2, 2]];
    let o: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(&mut rng, s, 1.0)).collect();
    let m: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(&mut rng, s, 1.0)).collect();
    for (lambda, want) in [(1.0, &o), (0.0, &m)] {
        let mut g = Graph::new();
        let ov: Vec<_> = o.iter().map(|t| g.constant(t.clone())).collect();
        let mv: Vec<_> = m.iter().map(|t| g.constant(t.clone())).collect();
        let mixed = cross_mix(&mut g, &ov, &mv, lambda).unwrap();
        let exact = mixed.iter().zip(want.iter()).all(|(&v, w)| g.value(v) == w);
        ok &= exact;
        notes.push(format!("cross_mix λ={lambda}: {}", if exact { "exact" } else { "differs" }));
    }

    let mut tr = Pretrainer::<f64>::new(tiny_pretrain(Ablation::Full, 8)).unwrap();
    for (i, p) in tr.state.ordinary.clone().weights_mut() {
        for v in p.iter_mut() {
            *v += 0.1;
        }
        tr.state.ordinary.get_mut(i).value.data_mut().copy_from_slice(p);
    }
    let mut same = tr.state.clone();
    same.ema_update(1.0).unwrap();
    let noop = same == tr.state;
    let mut copy = tr.state.clone();
    copy.ema_update(0.0).unwrap();
    let copied = copy.momentum == copy.ordinary && copy.momentum != tr.state.momentum;
    ok &= noop && copied;
    notes.push(format!("ema β=1 no-op: {noop}, β=0 copy: {copied}"));

    let batch = randn(&mut rng, &[4, 1, 1, 8, 8], 0.5).map(|v| v + 0.5);
    let mut t = tr.make_triplet(&batch, 0, 0).unwrap();
    t.lambda = 1.0;
    let (o, h) = (Branch::Ordinary as usize, Branch::Hybrid as usize);
    t.inputs[h] = t.inputs[o].clone();
    t.targets[h] = t.targets[o].clone();
    t.specs[h] = t.specs[o].clone();
    let pass = tr.forward(&t, true, false).unwrap();
    let r = pass.report(tr.config.loss_weights).unwrap();
    let diff = (r.branches[h] - r.branches[o]).abs();
    ok &= diff <= 1e-12;
    notes.push(format!("hybrid vs ordinary reconstruction |diff| {diff:.1e}"));
    (ok, notes.join("; "))
}

// 4. Every transform spec survives its indicator; flips and rotations
// compose to the identity bit for bit.
fn transform_suite() -> Verdict {
    let mut rng = rng_for(4, &[]);
    let mut ok = true;
    let mut notes = Vec::new();
    for (dims, expected, shape) in [(Dims::Three, 32, [2, 3, 5, 5]), (Dims::Two, 16, [2, 1, 6, 6])] {
        let specs = TransformSpec::enumerate(dims);
        let distinct = {
            let mut v: Vec<_> = specs.iter().map(|s| s.indicator()).collect();
            v.dedup();
            v.len()
        };
        let round = specs
            .iter()
            .all(|s| TransformSpec::from_indicator(&s.indicator()).unwrap() == *s);
        let x = randn(&mut rng, &shape, 1.0);
        let mut identities = true;
        for s in &specs {
            let flip = TransformSpec {
                rotation: Rotation::R0,
                ..*s
            };
            let twice = apply_transform(&flip, &apply_transform(&flip, &x).unwrap()).unwrap();
            identities &= twice == x;
            let rot = TransformSpec {
                rotation: s.rotation,
                ..TransformSpec::identity(dims)
            };
            let mut y = x.clone();
            for _ in 0..4 {
                y = apply_transform(&rot, &y).unwrap();
            }
            identities &= y == x;
        }
        let good = specs.len() == expected && distinct == expected && round && identities;
        ok &= good;
        notes.push(format!(
            "{}D: {} specs, {} distinct indicators, round trip {round}, identities {identities}",
            u8::from(dims),
            specs.len(),
            distinct
        ));
    }
    (ok, notes.join("; "))
}

// 5. Queue FIFO behaviour, capacity bound, saturation count.
fn queue_semantics() -> Verdict {
    let mut rng = rng_for(5, &[]);
    let mut fifo = true;
    let mut bounded = true;
    for _ in 0..1000 {
        let cap = rng.gen_range(1..40);
        let dim = rng.gen_range(1..4);
        let mut q = FeatureQueue::<f64>::new(cap, dim);
        let mut model: VecDeque<Vec<f64>> = VecDeque::new();
        let mut counter = 0.0;
        for _ in 0..rng.gen_range(1..15) {
            let n = rng.gen_range(0..12);
            let mut rows = Vec::new();
            for _ in 0..n {
                let r: Vec<f64> = (0..dim).map(|d| counter + d as f64 / 10.0).collect();
                counter += 1.0;
                rows.extend_from_slice(&r);
                model.push_back(r);
                if model.len() > cap {
                    model.pop_front();
                }
            }
            q.push(&Tensor::from_vec(&[n, dim], rows).unwrap()).unwrap();
            bounded &= q.len() <= cap;
            let flat: Vec<f64> = model.iter().flatten().copied().collect();
            fifo &= q.snapshot().data() == flat.as_slice() && q.len() == model.len();
        }
    }
    let mut q = FeatureQueue::<f64>::new(16384, 2);
    let rows = Tensor::zeros(&[3 * 256, 2]);
    let mut iterations = 0;
    let mut monotone = true;
    while q.len() < 16384 {
        let before = q.len();
        q.push(&rows).unwrap();
        monotone &= q.len() >= before;
        iterations += 1;
    }
    q.push(&rows).unwrap();
    let steady = q.len() == 16384;
    let ok = fifo && bounded && iterations == 22 && monotone && steady;
    (
        ok,
        format!("1000 trials FIFO {fifo}, bounded {bounded}; 16384 / 768 saturates after {iterations} iterations"),
    )
}

fn desk_losses(seed: u64) -> Vec<f64> {
    let spec = SynthSpec {
        count: 96,
        size: [16, 16, 1],
        ..SynthSpec::default()
    };
    let corpus = generate::<f32>(&spec).unwrap();
    let cfg = PretrainConfig {
        batch_size: 8,
        max_iterations: Some(100),
        seed,
        ..tiny_pretrain(Ablation::Full, 16)
    };
    let mut tr = Pretrainer::<f32>::new(cfg).unwrap();
    let mut losses = Vec::new();
    let train = corpus.split(Split::Train).unwrap().images;
    let val = corpus.split(Split::Val).unwrap().images;
    tr.fit(
        &train,
        &val,
        |s| {
            losses.push(s.loss.total);
            Ok(())
        },
        |_, _| Ok(()),
    )
    .unwrap();
    losses
}

// 6. Identical seeds give identical loss curves.
fn determinism() -> Verdict {
    let a = desk_losses(6);
    let b = desk_losses(6);
    let worst = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let ok = a.len() == 100 && b.len() == 100 && worst <= 1e-6;
    (ok, format!("{} and {} iterations, max |diff| {worst:.1e}", a.len(), b.len()))
}

// 9. Metrics against independent counting.
fn metric_oracles() -> Verdict {
    let mut rng = rng_for(9, &[]);
    let mut auc_ok = 0;
    let mut auc_cases = 0;
    let mut dice_ok = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..25);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        auc_cases += 1;
        auc_ok += (auc(&scores, &labels).unwrap() == wins / pairs) as usize;

        let pred: Vec<f32> = (0..n).map(|_| rng.gen_range(0..2) as f32).collect();
        let gt: Vec<f32> = (0..n).map(|_| rng.gen_range(0..2) as f32).collect();
        let p: std::collections::BTreeSet<usize> = (0..n).filter(|&i| pred[i] == 1.0).collect();
        let g: std::collections::BTreeSet<usize> = (0..n).filter(|&i| gt[i] == 1.0).collect();
        let eps = 1e-5;
        let want = (2.0 * p.intersection(&g).count() as f64 + eps) / ((p.len() + g.len()) as f64 + eps);
        dice_ok += (dice(&pred, &gt, eps).unwrap() == want) as usize;
    }
    (
        auc_ok == auc_cases && dice_ok == 1000,
        format!("AUC exact on {auc_ok}/{auc_cases}, Dice exact on {dice_ok}/1000"),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

// 10. Archive stability and exact resumption.
fn checkpoint_round_trip() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        count: 64,
        size: [16, 16, 1],
        ..SynthSpec::default()
    };
    let corpus = generate::<f32>(&spec).unwrap();
    let train = corpus.split(Split::Train).unwrap().images;
    let val = corpus.split(Split::Val).unwrap().images;
    let cfg = PretrainConfig {
        batch_size: 8,
        max_epochs: 6,
        ..tiny_pretrain(Ablation::Full, 16)
    };
    let mut straight = Pretrainer::<f32>::new(cfg).unwrap();
    let mut halted = straight.clone();
    let full: Vec<f64> = (0..6).map(|_| straight.run_epoch(&train, &val).unwrap().val_total).collect();
    for _ in 0..3 {
        halted.run_epoch(&train, &val).unwrap();
    }

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    save_checkpoint(&a, &halted.state, &CheckpointMeta::new(&halted.config, &halted.progress)).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&b, &loaded.state, &loaded.meta).unwrap();
    let ckpt_same = dir_bytes(&a) == dir_bytes(&b) && dir_bytes(&a).iter().any(|(n, _)| n == MANIFEST);

    let (s1, s2) = (tmp.path().join("s1"), tmp.path().join("s2"));
    save_run_state(&s1, &halted).unwrap();
    let mut resumed = resume(&s1).unwrap();
    save_run_state(&s2, &resumed).unwrap();
    let state_same = dir_bytes(&s1) == dir_bytes(&s2);

    let rest: Vec<f64> = (0..3).map(|_| resumed.run_epoch(&train, &val).unwrap().val_total).collect();
    let worst = full[3..].iter().zip(&rest).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    (
        ckpt_same && state_same && worst <= 1e-5,
        format!("checkpoint bytes identical {ckpt_same}, run state bytes identical {state_same}, resumed val loss max |diff| {worst:.1e}"),
    )
}

/// Shared pretraining runs for criteria 7 and 8.
struct DeskStudy {
    corpus: Corpus<f32>,
    runs: Vec<(Ablation, u64, Pretrainer<f32>, f64)>,
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn desk_config(ablation: Ablation, seed: u64) -> PretrainConfig {
    PretrainConfig {
        network: NetworkConfig {
            base_width: 8,
            ..NetworkConfig::desk(Dims::Two)
        },
        batch_size: 32,
        max_iterations: Some(2000),
        ablation,
        seed,
        crops: CropConfig {
            out_size: [32, 32, 1],
            ..CropConfig::default()
        },
        ..PretrainConfig::desk(Dims::Two)
    }
}

fn desk_study() -> DeskStudy {
    let spec = SynthSpec {
        size: [32, 32, 1],
        ..SynthSpec::desk(Dims::Two)
    };
    let corpus = generate::<f32>(&spec).unwrap();
    let train = corpus.split(Split::Train).unwrap().images;
    let val = corpus.split(Split::Val).unwrap().images;
    let mut runs = Vec::new();
    for ablation in [Ablation::ContraOnly, Ablation::Full] {
        for seed in SEEDS {
            let t0 = Instant::now();
            let mut tr = Pretrainer::<f32>::new(desk_config(ablation, seed)).unwrap();
            tr.fit(&train, &val, |_| Ok(()), |_, _| Ok(())).unwrap();
            let secs = t0.elapsed().as_secs_f64();
            println!(
                "    pretrained {} seed {seed}: {} iterations, {} epochs, {secs:.0}s",
                ablation.name(),
                tr.progress.iteration,
                tr.progress.epoch
            );
            runs.push((ablation, seed, tr, secs));
        }
    }
    DeskStudy { corpus, runs }
}

fn rotation_accuracy(study: &DeskStudy, params: &ParamSet<f32>, encoder: &Encoder, seed: u64) -> f64 {
    let train = study.corpus.split(Split::Train).unwrap().images;
    let test = study.corpus.split(Split::Test).unwrap().images;
    let cfg = ProbeConfig {
        seed,
        ..ProbeConfig::default()
    };
    linear_probe(ProbeTask::Rotation, encoder, params, &train, &test, &cfg).unwrap().mean
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// 7. Rotation probe: full PCRL against contrastive-only and random init.
fn rotation_probe(study: &DeskStudy) -> Verdict {
    let by = |a: Ablation| -> Vec<f64> {
        study
            .runs
            .iter()
            .filter(|r| r.0 == a)
            .map(|(_, seed, tr, _)| rotation_accuracy(study, &tr.state.ordinary, &tr.net.encoder, *seed))
            .collect()
    };
    let full = by(Ablation::Full);
    let contra = by(Ablation::ContraOnly);
    let random: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let tr = Pretrainer::<f32>::new(desk_config(Ablation::Full, s)).unwrap();
            rotation_accuracy(study, &tr.state.ordinary, &tr.net.encoder, s)
        })
        .collect();
    let slowest = study.runs.iter().map(|r| r.3).fold(0.0, f64::max);
    let (mf, mc, mr) = (mean(&full), mean(&contra), mean(&random));
    let ok = mf - mc >= 0.05 && mf > mr && mc > mr && slowest <= 900.0;
    (
        ok,
        format!(
            "accuracy full {mf:.4} {full:.3?}, contra_only {mc:.4} {contra:.3?}, random init {mr:.4} {random:.3?}; margin {:+.2} points (need >= 5); slowest run {slowest:.0}s",
            100.0 * (mf - mc)
        ),
    )
}

// 8. Segmentation with 10% labels: PCRL checkpoint against scratch.
fn low_label_segmentation(study: &DeskStudy) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let train = study.corpus.split(Split::Train).unwrap();
    let val = study.corpus.split(Split::Val).unwrap();
    let test = study.corpus.split(Split::Test).unwrap();
    let (mut pre, mut scratch) = (Vec::new(), Vec::new());
    for (_, seed, tr, _) in study.runs.iter().filter(|r| r.0 == Ablation::Full) {
        let path = tmp.path().join(format!("full-{seed}"));
        save_checkpoint(&path, &tr.state, &CheckpointMeta::new(&tr.config, &tr.progress)).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let ft = FinetuneConfig {
            label_fraction: 0.1,
            batch_size: 8,
            seed: *seed,
            ..FinetuneConfig::default()
        };
        let labelled = label_subset(&train, ft.label_fraction, *seed).unwrap();
        let net = &ckpt.meta.config.network;
        let mut a = Segmenter::new(net, Some((&ckpt.state.ordinary, &ckpt.state.decoder)), *seed).unwrap();
        a.fit(&labelled, &val, &ft).unwrap();
        pre.push(a.evaluate(&test).unwrap().mean);
        let mut b = Segmenter::<f32>::new(net, None, *seed).unwrap();
        b.fit(&labelled, &val, &ft).unwrap();
        scratch.push(b.evaluate(&test).unwrap().mean);
    }
    let (mp, ms) = (mean(&pre), mean(&scratch));
    (
        mp - ms > 0.0,
        format!("Dice from checkpoint {mp:.4} {pre:.3?}, from scratch {ms:.4} {scratch:.3?}; margin {:+.4}", mp - ms),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(usize, &str, bool)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Verdict| {
        let t0 = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        println!(
            "criterion {n:>2} {}: {name} ({:.1}s) - {detail}",
            if ok { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
        results.push((n, name, ok));
    };
    let quick: [(usize, &'static str, fn() -> Verdict); 8] = [
        (1, "contrastive loss matches softmax enumeration", nce_oracle),
        (2, "gradients match finite differences", gradient_checks),
        (3, "mixing, EMA and hybrid endpoints", endpoints),
        (4, "transform indicators and identities", transform_suite),
        (5, "queue semantics", queue_semantics),
        (6, "pretraining is deterministic", determinism),
        (9, "AUC and Dice match counting oracles", metric_oracles),
        (10, "checkpoint round trip and resumption", checkpoint_round_trip),
    ];
    for (n, name, f) in quick {
        if run(n) {
            record(n, name, &f);
        }
    }
    if run(7) || run(8) {
        let t0 = Instant::now();
        let study = catch_unwind(desk_study);
        println!("    desk pretraining took {:.0}s", t0.elapsed().as_secs_f64());
        match study {
            Ok(study) => {
                if run(7) {
                    record(7, "rotation probe favours full PCRL", &|| rotation_probe(&study));
                }
                if run(8) {
                    record(8, "low-label segmentation favours pretraining", &|| low_label_segmentation(&study));
                }
            }
            Err(_) => {
                for n in [7, 8].into_iter().filter(|&n| run(n)) {
                    record(n, "desk study", &|| (false, "pretraining panicked".into()));
                }
            }
        }
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed {:?}", results.len() - failed.len(), failed.len(), failed);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
