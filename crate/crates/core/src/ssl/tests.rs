use proptest::prelude::*;

use super::*;
use crate::gradcheck_suite::{registry, run_case, GRADCHECK_TRIALS};
use crate::nn::{ArchConfig, AuxHead};
use crate::tasks::Task;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

fn rot(k: u8) -> RotationLabel {
    RotationLabel::new(k).unwrap()
}

#[test]
fn rotation_examples() {
    let img = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(rotate_image(&img, rot(0)).unwrap(), img);
    assert_eq!(rotate_image(&img, rot(1)).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
    let mut x = t(&[2, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
    let orig = x.clone();
    for i in 0..4 {
        x = rotate_image(&x, rot(1)).unwrap();
        let expect = if i % 2 == 0 { [2, 3, 2] } else { [2, 2, 3] };
        assert_eq!(x.shape(), &expect);
    }
    assert_eq!(x, orig);
    assert!(RotationLabel::new(4).is_err());
}

#[test]
fn rotation_composition_table() {
    let img = t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    for a in 0..4 {
        for b in 0..4 {
            let two = rotate_image(&rotate_image(&img, rot(a)).unwrap(), rot(b)).unwrap();
            let one = rotate_image(&img, rot(a).compose(rot(b))).unwrap();
            assert_eq!(two, one, "{a} then {b}");
        }
    }
}

#[test]
fn rotation_loss_examples() {
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::zeros(&[3, 4]));
    let l = rotation_loss(&mut tape, u, &[rot(0), rot(2), rot(3)]).unwrap();
    assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    let s = tape.constant(t(&[1, 4], &[0.0, 1000.0, 0.0, 0.0]));
    let l = rotation_loss(&mut tape, s, &[rot(1)]).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-12);
    let o = tape.constant(t(&[1, 4], &[1.0, 0.0, 0.0, 0.0]));
    let l = rotation_loss(&mut tape, o, &[rot(0)]).unwrap();
    let e = 1f64.exp();
    assert!((tape.value(l).item().unwrap() + (e / (e + 3.0)).ln()).abs() < 1e-12);
    assert!((tape.value(l).item().unwrap() - 0.74366).abs() < 1e-5);
}

fn store(pairs: &[(&str, &[f64])]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, v) in pairs {
        s.insert(*n, t(&[v.len()], v));
    }
    s
}

#[test]
fn momentum_examples() {
    let q = store(&[("trunk.a", &[0.0]), ("head.depth.weight", &[5.0])]);
    let mut enc = MomentumEncoder::new(&store(&[("trunk.a", &[1.0]), ("head.depth.weight", &[5.0])]), 0.999).unwrap();
    assert!(!enc.key.contains("head.depth.weight"), "target head is not part of the key branch");
    enc.update(&q).unwrap();
    assert_eq!(enc.key.get("trunk.a").unwrap().data(), &[0.999]);

    let q = store(&[("trunk.a", &[2.5, -1.0])]);
    let mut enc = MomentumEncoder::new(&q, 0.9).unwrap();
    enc.update(&q).unwrap();
    assert_eq!(enc.key.get("trunk.a").unwrap().data(), &[2.5, -1.0]);

    let mut enc = MomentumEncoder::new(&store(&[("aux.b", &[2.0])]), 0.9).unwrap();
    let q = store(&[("aux.b", &[1.0])]);
    enc.update(&q).unwrap();
    assert!((enc.key.get("aux.b").unwrap().data()[0] - 1.9).abs() < 1e-15);
    assert_eq!(q.get("aux.b").unwrap().data(), &[1.0]);

    let bad = store(&[("aux.b", &[1.0, 2.0])]);
    assert!(enc.update(&bad).is_err());
    assert!(MomentumEncoder::new(&q, 1.0).is_err());
}

proptest! {
    #[test]
    fn momentum_drift_is_bounded(k in proptest::collection::vec(-3.0f64..3.0, 1..20), shift in -2.0f64..2.0, m in 0.0f64..0.999) {
        let q: Vec<f64> = k.iter().map(|v| v * 0.3 + shift).collect();
        let qs = store(&[("trunk.w", &q)]);
        let mut enc = MomentumEncoder::new(&store(&[("trunk.w", &k)]), m).unwrap();
        enc.update(&qs).unwrap();
        let after = enc.key.get("trunk.w").unwrap().data();
        let drift = after.iter().zip(&k).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let gap = q.iter().zip(&k).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(drift <= (1.0 - m) * gap + 1e-12);
    }
}

fn unit(d: usize, hot: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[hot] = 1.0;
    v
}

#[test]
fn queue_examples() {
    let mut q = MemoryQueue::new(3, 4).unwrap();
    let keys: Vec<f64> = (0..3).flat_map(|i| unit(4, i)).collect();
    q.push(&t(&[3, 4], &keys), &[0, 1, 2]).unwrap();
    assert_eq!(q.len(), 3);
    q.push(&t(&[1, 4], &unit(4, 3)), &[3]).unwrap();
    assert_eq!(q.len(), 3);
    assert_eq!(q.sources_in_order(), vec![1, 2, 3]);
    assert_eq!(q.keys_in_order()[2], unit(4, 3));

    let mut q = MemoryQueue::new(2, 128).unwrap();
    let mut raw = vec![0.0; 128];
    raw[0] = 3.0;
    raw[1] = 4.0;
    q.push(&t(&[1, 128], &raw), &[0]).unwrap();
    let stored = &q.keys_in_order()[0];
    assert!((stored[0] - 0.6).abs() < 1e-15 && (stored[1] - 0.8).abs() < 1e-15);
    assert!(q.push(&t(&[1, 4], &[1.0, 0.0, 0.0, 0.0]), &[0]).is_err());
}

proptest! {
    #[test]
    fn queue_matches_replay_oracle(capacity in 1usize..12, batches in proptest::collection::vec(1usize..5, 1..10)) {
        let dim = 3;
        let mut q = MemoryQueue::new(capacity, dim).unwrap();
        let mut replay: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut next = 0usize;
        for b in batches {
            let mut data = Vec::new();
            let mut ids = Vec::new();
            for _ in 0..b {
                let v = vec![1.0 + next as f64, (next % 3) as f64, -(next as f64) * 0.5];
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                replay.push((next, v.iter().map(|x| x / n).collect()));
                data.extend(v);
                ids.push(next);
                next += 1;
            }
            q.push(&t(&[b, dim], &data), &ids).unwrap();
            for row in q.keys().data().chunks(dim) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
        }
        let keep = replay.len().min(capacity);
        let tail = &replay[replay.len() - keep..];
        prop_assert_eq!(q.len(), keep);
        prop_assert_eq!(q.sources_in_order(), tail.iter().map(|(i, _)| *i).collect::<Vec<_>>());
        prop_assert_eq!(q.keys_in_order(), tail.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>());
    }
}

fn nce(pos: &[f64], neg: &[f64], k: usize, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(t(&[pos.len()], pos));
    let n = tape.constant(t(&[pos.len(), k], neg));
    let l = info_nce(&mut tape, p, n, tau).unwrap();
    tape.value(l).item().unwrap()
}

#[test]
fn info_nce_examples() {
    assert!((nce(&[0.0], &[0.0, 0.0], 2, 1.0) - 3f64.ln()).abs() < 1e-15);
    let want = (1.0 + (-2f64).exp()).ln();
    assert!((nce(&[2.0], &[0.0], 1, 1.0) - want).abs() < 1e-15);
    assert!((want - 0.12693).abs() < 1e-5);
    let want = (1.0 + (-4f64).exp()).ln();
    assert!((nce(&[2.0], &[0.0], 1, 0.5) - want).abs() < 1e-15);
    assert!((want - 0.01815).abs() < 1e-5);
    // an empty queue leaves only the positive
    assert_eq!(nce(&[0.3], &[], 0, 0.2), 0.0);
    let mut tape = Tape::new();
    let p = tape.constant(t(&[1], &[0.0]));
    let n = tape.constant(t(&[1, 1], &[0.0]));
    assert!(info_nce(&mut tape, p, n, 0.0).is_err());
}

proptest! {
    #[test]
    fn info_nce_uniform_and_nonnegative(s in -1.0f64..1.0, k in 1usize..40, tau in 0.05f64..2.0, negs in proptest::collection::vec(-1.0f64..1.0, 40)) {
        let uniform = nce(&[s], &vec![s; k], k, tau);
        prop_assert!((uniform - ((k + 1) as f64).ln()).abs() < 1e-12);
        prop_assert!(nce(&[s], &negs[..k], k, tau) >= 0.0);
    }

    #[test]
    fn info_nce_decreases_with_positive_similarity(negs in proptest::collection::vec(-1.0f64..1.0, 8), tau in 0.05f64..1.0) {
        let a = nce(&[-0.5], &negs, 8, tau);
        let b = nce(&[0.2], &negs, 8, tau);
        let c = nce(&[0.9], &negs, 8, tau);
        prop_assert!(a > b && b > c);
    }
}

#[test]
fn dense_match_examples() {
    let d = 3;
    let q: Vec<f64> = [unit(d, 0), unit(d, 1), unit(d, 2)].concat();
    assert_eq!(dense_match(&q, &q, d).unwrap(), vec![0, 1, 2]);
    let same: Vec<f64> = [unit(d, 1), unit(d, 1), unit(d, 1)].concat();
    assert_eq!(dense_match(&q, &same, d).unwrap(), vec![0, 0, 0]);
    let s = 0.5f64.sqrt();
    let q2 = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let k2 = vec![0.0, 1.0, 0.0, s, s, 0.0];
    assert_eq!(dense_match(&q2, &k2, d).unwrap(), vec![1, 0]);
}

proptest! {
    #[test]
    fn dense_match_is_permutation_equivariant(raw in proptest::collection::vec(-1.0f64..1.0, 4 * 6 * 2), perm in Just(vec![2usize, 0, 5, 1, 3, 4]).prop_shuffle()) {
        let d = 4;
        let (q, k) = raw.split_at(4 * 6);
        let base = dense_match(q, k, d).unwrap();
        // permuted[i] = k[perm[i]]
        let permuted: Vec<f64> = perm.iter().flat_map(|&j| k[j * d..(j + 1) * d].to_vec()).collect();
        let moved = dense_match(q, &permuted, d).unwrap();
        for (b, m) in base.iter().zip(&moved) {
            prop_assert_eq!(perm[*m], *b);
        }
    }
}

#[test]
fn densecl_combination_examples() {
    assert_eq!(densecl_combine(1.3, 0.4, 0.0).unwrap(), 1.3);
    assert_eq!(densecl_combine(1.3, 0.4, 1.0).unwrap(), 0.4);
    assert!((densecl_combine(1.0, 0.5, 0.7).unwrap() - 0.65).abs() < 1e-15);
    assert!(densecl_combine(1.0, 0.5, 1.5).is_err());
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::scalar(1.0));
    let l = tape.constant(Tensor::scalar(0.5));
    let c = densecl_loss(&mut tape, g, l, DEFAULT_LOCAL_WEIGHT).unwrap();
    assert!((tape.value(c).item().unwrap() - 0.65).abs() < 1e-15);
}

fn densecl_model() -> (crate::nn::Model, ParamStore) {
    let m = crate::nn::Model::new(&ArchConfig::default(), &[Task::Depth], 4, AuxKind::DenseCl).unwrap();
    let p = m.init_params(2);
    (m, p)
}

fn feats(n: usize, c: usize, h: usize, seed: u64) -> Tensor {
    let mut s = seed;
    let data = (0..n * c * h * h)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(&[n, c, h, h], data).unwrap()
}

#[test]
fn projections_are_unit_and_deterministic() {
    let (m, p) = densecl_model();
    let AuxHead::DenseCl(head) = &m.aux else { unreachable!() };
    let x = feats(2, 16, 8, 3);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let f = tape.constant(x.clone());
        let g = project_global(&mut tape, &Bind::frozen(&p), &head.global, f).unwrap();
        let d = project_dense(&mut tape, &Bind::frozen(&p), head, f).unwrap();
        (tape.value(g).clone(), tape.value(d).clone())
    };
    let (g, d) = run(&x);
    assert_eq!(g.shape(), &[2, 128]);
    assert_eq!(d.shape(), &[2, 16, 128]);
    for row in g.data().chunks(128).chain(d.data().chunks(128)) {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        let cos: f64 = row.iter().map(|v| v * v).sum();
        assert!((cos - 1.0).abs() < 1e-9);
    }
    let (g2, d2) = run(&x);
    assert!(g.bit_eq(&g2) && d.bit_eq(&d2));

    let constant = Tensor::full(&[1, 16, 8, 8], 0.3);
    let (_, dc) = run(&constant);
    let first = &dc.data()[..128];
    for cell in dc.data().chunks(128) {
        assert_eq!(cell, first);
    }
}

#[test]
fn single_cell_grid_is_a_global_vector() {
    let arch = ArchConfig { grid: 1, ..ArchConfig::default() };
    let m = crate::nn::Model::new(&arch, &[Task::Depth], 4, AuxKind::DenseCl).unwrap();
    let p = m.init_params(5);
    let AuxHead::DenseCl(head) = &m.aux else { unreachable!() };
    let mut tape = Tape::new();
    let f = tape.constant(feats(3, 16, 6, 9));
    let d = project_dense(&mut tape, &Bind::frozen(&p), head, f).unwrap();
    assert_eq!(tape.shape(d), &[3, 1, 128]);
}

#[test]
fn key_branch_never_receives_gradients() {
    let (m, p) = densecl_model();
    let AuxHead::DenseCl(head) = &m.aux else { unreachable!() };
    let enc = MomentumEncoder::new(&p, 0.999).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(feats(2, 3, 8, 4));
    let qf = m.features(&mut tape, &Bind::trainable(&p), x).unwrap();
    let q = project_global(&mut tape, &Bind::trainable(&p), &head.global, qf).unwrap();
    let kf = m.features(&mut tape, &enc.bind(), x).unwrap();
    let k = project_global(&mut tape, &enc.bind(), &head.global, kf).unwrap();
    assert!(!tape.requires_grad(k));
    let kv = tape.value(k).clone();
    let negs = Tensor::new(&[1, 128], kv.data()[..128].to_vec()).unwrap();
    let l = contrastive_loss(&mut tape, q, &kv, &negs, 0.2).unwrap();
    let grads = tape.backward(l).unwrap();
    assert!(grads.keys().all(|n| p.contains(n)));
    assert!(grads.contains_key("trunk.stem.conv.weight"));
    assert!(!grads.keys().any(|n| n.starts_with("aux.local")), "local head untouched by the global loss");
}

#[test]
fn ssl_losses_pass_grad_check() {
    for name in ["rotation_cross_entropy", "info_nce", "densecl_combined"] {
        let case = registry().into_iter().find(|c| c.name == name).unwrap();
        let r = run_case(&case, GRADCHECK_TRIALS, 13);
        assert!(r.passed(), "{r:?}");
    }
}
