//! Registry of finite-difference checks for every layer and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_many, Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::functional as F;
use crate::ssl::{self, RotationLabel};
use crate::tasks::{self, Map};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_TRIALS: usize = 10;

pub type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Inputs and scalar function for one randomised trial.
pub struct Trial {
    pub inputs: Vec<Tensor>,
    pub f: LossFn,
}

pub struct GradCase {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> Trial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub worst: f64,
    pub error: Option<String>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.worst < GRADCHECK_TOL
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("finite")
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// `sum(y * r)` with a fixed random `r`, so every output entry matters.
fn weighted_sum(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    tape.sum_all(p)
}

fn conv_case(rng: &mut ChaCha8Rng) -> Trial {
    let stride = rng.gen_range(1..=2);
    let inputs = vec![rand_t(rng, &[2, 2, 5, 5]), rand_t(rng, &[3, 2, 3, 3]), rand_t(rng, &[3])];
    let ho = (5 + 2 - 3) / stride + 1;
    let r = rand_t(rng, &[2, 3, ho, ho]);
    Trial { inputs, f: Box::new(move |t, v| { let y = F::conv2d(t, v[0], v[1], v[2], stride, 1)?; weighted_sum(t, y, &r) }) }
}

fn group_norm_case(rng: &mut ChaCha8Rng) -> Trial {
    let inputs = vec![rand_t(rng, &[2, 4, 3, 3]), uniform(rng, &[4], 0.5, 1.5), rand_t(rng, &[4])];
    let r = rand_t(rng, &[2, 4, 3, 3]);
    Trial { inputs, f: Box::new(move |t, v| { let y = F::group_norm(t, v[0], v[1], v[2], 2, 1e-5)?; weighted_sum(t, y, &r) }) }
}

fn gap_case(rng: &mut ChaCha8Rng) -> Trial {
    let inputs = vec![rand_t(rng, &[2, 3, 4, 5])];
    let r = rand_t(rng, &[2, 3]);
    Trial { inputs, f: Box::new(move |t, v| { let y = F::global_avg_pool(t, v[0])?; weighted_sum(t, y, &r) }) }
}

fn adaptive_pool_case(rng: &mut ChaCha8Rng) -> Trial {
    let inputs = vec![rand_t(rng, &[2, 2, 7, 6])];
    let r = rand_t(rng, &[2, 2, 3, 3]);
    Trial { inputs, f: Box::new(move |t, v| { let y = F::adaptive_avg_pool(t, v[0], 3)?; weighted_sum(t, y, &r) }) }
}

fn upsample_case(rng: &mut ChaCha8Rng) -> Trial {
    let inputs = vec![rand_t(rng, &[1, 2, 3, 4])];
    let r = rand_t(rng, &[1, 2, 6, 7]);
    Trial { inputs, f: Box::new(move |t, v| { let y = F::bilinear_upsample(t, v[0], 6, 7)?; weighted_sum(t, y, &r) }) }
}

fn linear_case(rng: &mut ChaCha8Rng) -> Trial {
    let inputs = vec![rand_t(rng, &[3, 4]), rand_t(rng, &[3]), rand_t(rng, &[5, 4])];
    let r = rand_t(rng, &[5, 3]);
    Trial { inputs, f: Box::new(move |t, v| { let y = F::linear(t, v[0], v[1], v[2])?; weighted_sum(t, y, &r) }) }
}

fn to_rows_case(rng: &mut ChaCha8Rng) -> Trial {
    let inputs = vec![rand_t(rng, &[2, 3, 2, 2])];
    let r = rand_t(rng, &[8, 3]);
    Trial { inputs, f: Box::new(move |t, v| { let y = F::to_rows(t, v[0])?; weighted_sum(t, y, &r) }) }
}

fn normalize_case(rng: &mut ChaCha8Rng) -> Trial {
    let inputs = vec![uniform(rng, &[3, 5], 0.2, 1.0)];
    let r = rand_t(rng, &[3, 5]);
    Trial { inputs, f: Box::new(move |t, v| { let y = F::l2_normalize_rows(t, v[0])?; weighted_sum(t, y, &r) }) }
}

fn l1_case(rng: &mut ChaCha8Rng) -> Trial {
    let inputs = vec![rand_t(rng, &[2, 1, 3, 3])];
    let target = rand_t(rng, &[2, 1, 3, 3]);
    Trial { inputs, f: Box::new(move |t, v| tasks::l1_loss(t, v[0], &target)) }
}

fn semseg_ce_case(rng: &mut ChaCha8Rng) -> Trial {
    let classes = 4;
    let inputs = vec![uniform(rng, &[2, classes, 3, 3], -2.0, 2.0)];
    let maps: Vec<Map<u8>> = (0..2)
        .map(|_| Map::new(3, 3, (0..9).map(|_| rng.gen_range(0..classes as u8)).collect()).unwrap())
        .collect();
    Trial {
        inputs,
        f: Box::new(move |t, v| {
            let refs: Vec<&Map<u8>> = maps.iter().collect();
            tasks::ce_loss_semseg(t, v[0], &refs)
        }),
    }
}

fn boundary_bce_case(rng: &mut ChaCha8Rng) -> Trial {
    let inputs = vec![uniform(rng, &[2, 1, 4, 4], -3.0, 3.0)];
    let target = Tensor::new(&[2, 1, 4, 4], (0..32).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect()).unwrap();
    Trial { inputs, f: Box::new(move |t, v| tasks::weighted_bce_boundary(t, v[0], &target)) }
}

fn rotation_ce_case(rng: &mut ChaCha8Rng) -> Trial {
    let inputs = vec![uniform(rng, &[5, 4], -2.0, 2.0)];
    let labels: Vec<RotationLabel> = (0..5).map(|_| RotationLabel::new(rng.gen_range(0..4)).unwrap()).collect();
    Trial { inputs, f: Box::new(move |t, v| ssl::rotation_loss(t, v[0], &labels)) }
}

fn info_nce_case(rng: &mut ChaCha8Rng) -> Trial {
    let tau = [0.07, 0.2, 1.0][rng.gen_range(0..3)];
    let inputs = vec![rand_t(rng, &[4]), rand_t(rng, &[4, 6])];
    Trial { inputs, f: Box::new(move |t, v| ssl::info_nce(t, v[0], v[1], tau)) }
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor {
    let mut t = rand_t(rng, &[rows, d]);
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Global and local InfoNCE through normalisation and cell matching, mixed
/// with the local weight.
fn densecl_case(rng: &mut ChaCha8Rng) -> Trial {
    let (n, cells, d) = (2, 4, 6);
    let inputs = vec![rand_t(rng, &[n, d]), rand_t(rng, &[n * cells, d])];
    let k_global = unit_rows(rng, n, d);
    let k_local = unit_rows(rng, n * cells, d);
    let neg_global = unit_rows(rng, 5, d);
    let neg_local = unit_rows(rng, 5, d);
    Trial {
        inputs,
        f: Box::new(move |t, v| {
            let qg = F::l2_normalize_rows(t, v[0])?;
            let lg = ssl::contrastive_loss(t, qg, &k_global, &neg_global, 0.2)?;
            let ql = F::l2_normalize_rows(t, v[1])?;
            let qcells = t.value(ql).reshaped(&[n, cells, d])?;
            let kcells = k_local.reshaped(&[n, cells, d])?;
            let (pos, _) = ssl::local_positives(&qcells, &kcells)?;
            let ll = ssl::contrastive_loss(t, ql, &pos, &neg_local, 0.2)?;
            ssl::densecl_loss(t, lg, ll, ssl::DEFAULT_LOCAL_WEIGHT)
        }),
    }
}

/// Every registered check, one per differentiable layer or loss.
pub fn registry() -> Vec<GradCase> {
    vec![
        GradCase { name: "conv2d", build: conv_case },
        GradCase { name: "group_norm", build: group_norm_case },
        GradCase { name: "global_avg_pool", build: gap_case },
        GradCase { name: "adaptive_avg_pool", build: adaptive_pool_case },
        GradCase { name: "bilinear_upsample", build: upsample_case },
        GradCase { name: "linear", build: linear_case },
        GradCase { name: "to_rows", build: to_rows_case },
        GradCase { name: "l2_normalize_rows", build: normalize_case },
        GradCase { name: "l1_loss", build: l1_case },
        GradCase { name: "semseg_cross_entropy", build: semseg_ce_case },
        GradCase { name: "weighted_boundary_bce", build: boundary_bce_case },
        GradCase { name: "rotation_cross_entropy", build: rotation_ce_case },
        GradCase { name: "info_nce", build: info_nce_case },
        GradCase { name: "densecl_combined", build: densecl_case },
    ]
}

/// A deliberately wrong gradient rule: `y = x^2` reporting `dy/dx = x`.
pub fn faulty_case() -> GradCase {
    fn build(rng: &mut ChaCha8Rng) -> Trial {
        Trial {
            inputs: vec![uniform(rng, &[3], 0.5, 1.5)],
            f: Box::new(|t, v| {
                let out = t.value(v[0]).map(|x| x * x);
                let y = t.custom("faulty_square", &[v[0]], out, |x, _, g| vec![x[0].zip_map(g, |a, g| a * g)]);
                t.sum_all(y)
            }),
        }
    }
    GradCase { name: "faulty_square", build }
}

pub fn run_case(case: &GradCase, trials: usize, seed: u64) -> CaseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ case.name.len() as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let trial = (case.build)(&mut rng);
        match grad_check_many(&trial.f, &trial.inputs, GRADCHECK_EPS) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return CaseReport { name: case.name, worst, error: Some(e.to_string()) },
        }
    }
    CaseReport { name: case.name, worst, error: None }
}

pub fn run_suite(cases: &[GradCase], trials: usize, seed: u64) -> Vec<CaseReport> {
    cases.iter().map(|c| run_case(c, trials, seed)).collect()
}
