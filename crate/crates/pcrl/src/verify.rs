//! A quick self-check suite behind `pcrl verify`: each check compares a core
//! routine with a direct recomputation or an algebraic identity.

use pcrl_core::downstream::{auc, dice, DICE_EPS};
use pcrl_core::graph::Graph;
use pcrl_core::network::cross_mix;
use pcrl_core::objectives::{nce_loss, FeatureQueue, NceMode};
use pcrl_core::rng::rng_for;
use pcrl_core::transforms::{apply_transform, Dims, Rotation, TransformSpec};
use pcrl_core::Tensor;
use rand::Rng;

pub struct Check {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

type Outcome = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Outcome {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn nce_matches_enumeration() -> Outcome {
    let mut rng = rng_for(11, &[]);
    for trial in 0..20 {
        let (q, k, queue) = (random(&mut rng, &[3, 5]), random(&mut rng, &[3, 5]), random(&mut rng, &[7, 5]));
        for mode in [NceMode::QueueOnly, NceMode::QueuePlusPositive] {
            let (got, _) = nce_loss(&q, &k, &queue, 0.2, mode).map_err(|e| e.to_string())?;
            let mut want = 0.0;
            for i in 0..3 {
                let dot = |a: &[f64]| q.data()[i * 5..i * 5 + 5].iter().zip(a).map(|(x, y)| x * y).sum::<f64>() / 0.2;
                let pos = dot(&k.data()[i * 5..i * 5 + 5]);
                let mut z: f64 = (0..7).map(|j| dot(&queue.data()[j * 5..j * 5 + 5]).exp()).sum();
                if mode == NceMode::QueuePlusPositive {
                    z += pos.exp();
                }
                want -= (pos.exp() / z).ln();
            }
            want /= 3.0;
            ensure((got - want).abs() < 1e-9, || format!("trial {trial}: {got} vs {want}"))?;
        }
    }
    Ok(())
}

fn metrics_match_counting() -> Outcome {
    let mut rng = rng_for(12, &[]);
    for _ in 0..200 {
        let n = rng.gen_range(2..20);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64).collect();
        let l: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if l[i] && !l[j] {
                    pairs += 1.0;
                    wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        if pairs > 0.0 {
            let got = auc(&s, &l).map_err(|e| e.to_string())?;
            ensure(got == wins / pairs, || format!("auc {got} vs {}", wins / pairs))?;
        }
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
        let inter = p.iter().zip(&g).filter(|(a, b)| **a == 1.0 && **b == 1.0).count() as f64;
        let size = p.iter().chain(&g).filter(|v| **v == 1.0).count() as f64;
        let want = (2.0 * inter + DICE_EPS) / (size + DICE_EPS);
        let got = dice(&p, &g, DICE_EPS).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("dice {got} vs {want}"))?;
    }
    Ok(())
}

fn transforms_round_trip() -> Outcome {
    let mut rng = rng_for(13, &[]);
    for (dims, count, shape) in [(Dims::Two, 16, [1, 1, 6, 6]), (Dims::Three, 32, [1, 3, 6, 6])] {
        let all = TransformSpec::enumerate(dims);
        ensure(all.len() == count, || format!("{} specs for {count}", all.len()))?;
        let x = random(&mut rng, &shape);
        for s in &all {
            let back = TransformSpec::from_indicator(&s.indicator()).map_err(|e| e.to_string())?;
            ensure(back == *s, || format!("{s:?} decoded as {back:?}"))?;
            let flips = TransformSpec {
                rotation: Rotation::R0,
                ..*s
            };
            let twice = apply_transform(&flips, &apply_transform(&flips, &x).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            ensure(twice == x, || format!("double flip {flips:?} is not the identity"))?;
        }
        let quarter = TransformSpec {
            rotation: Rotation::R90,
            ..TransformSpec::identity(dims)
        };
        let mut y = x.clone();
        for _ in 0..4 {
            y = apply_transform(&quarter, &y).map_err(|e| e.to_string())?;
        }
        ensure(y == x, || "four quarter turns are not the identity".into())?;
    }
    Ok(())
}

fn queue_is_fifo() -> Outcome {
    let mut rng = rng_for(14, &[]);
    for _ in 0..100 {
        let cap = rng.gen_range(1..12);
        let mut q = FeatureQueue::<f64>::new(cap, 1);
        let mut model: Vec<f64> = Vec::new();
        let mut next = 0.0;
        for _ in 0..rng.gen_range(0..10) {
            let n = rng.gen_range(0..6);
            let rows: Vec<f64> = (0..n).map(|i| next + i as f64).collect();
            next += n as f64;
            q.push(&Tensor::from_vec(&[n, 1], rows.clone()).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            model.extend(rows);
            let excess = model.len().saturating_sub(cap);
            model.drain(..excess);
            ensure(q.len() <= cap, || "queue exceeded its capacity".into())?;
            ensure(q.snapshot().data() == model.as_slice(), || "queue order differs from FIFO".into())?;
        }
    }
    Ok(())
}

fn endpoints_are_exact() -> Outcome {
    let mut rng = rng_for(15, &[]);
    let (a, b) = (random(&mut rng, &[2, 3, 1, 4, 4]), random(&mut rng, &[2, 3, 1, 4, 4]));
    for (lambda, want) in [(1.0, &a), (0.0, &b)] {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let mixed = cross_mix(&mut g, &[va], &[vb], lambda).map_err(|e| e.to_string())?;
        ensure(g.value(mixed[0]) == want, || format!("cross_mix at {lambda} is not a pure pyramid"))?;
    }
    Ok(())
}

pub fn run_all() -> Vec<Check> {
    let checks: [(&'static str, fn() -> Outcome); 5] = [
        ("nce loss matches softmax enumeration", nce_matches_enumeration),
        ("auc and dice match counting", metrics_match_counting),
        ("transform indicators and identities", transforms_round_trip),
        ("queue is first in, first out", queue_is_fifo),
        ("cross-mix endpoints", endpoints_are_exact),
    ];
    checks
        .into_iter()
        .map(|(name, f)| Check { name, outcome: f() })
        .collect()
}
