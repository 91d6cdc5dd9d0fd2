#![allow(dead_code)]

use std::collections::BTreeMap;

use interlingua::data::{FilterOptions, LanguageData, ParallelCorpus, ToyTask};
use interlingua::system::System;
use interlingua::tensor::{Tape, Tensor, Var};
use interlingua::training::{init_system, train, Frozen, StepRecord, TrainConfig, TrainState};
use interlingua::transformer::{LanguageModule, ModelConfig, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Random values with magnitude at least 0.1, keeping kinks of relu/abs
/// out of reach of the finite-difference step.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    randn(shape, rng).map(|v| v.signum() * (0.1 + v.abs()))
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// entry carries a distinct sensitivity.
fn weighted_sum(tape: &mut Tape, out: Var, rng: &mut impl Rng) -> interlingua::Result<Var> {
    let w = tape.constant(randn(tape.shape(out), rng));
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

/// Max relative error between analytic and central-difference gradients of
/// `sum(W * f(inputs))` over every input entry.
pub fn check_op(
    inputs: &[Tensor],
    seed: u64,
    f: &dyn Fn(&mut Tape, &[Var]) -> interlingua::Result<Var>,
) -> f64 {
    let eval = |xs: &[Tensor], backward: bool| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars).expect("op runs");
        let loss = weighted_sum(&mut tape, out, &mut rng(seed ^ 0x5eed)).unwrap();
        let value = tape.value(loss).item();
        if !backward {
            return (value, Vec::new());
        }
        let grads = tape.backward(loss).unwrap();
        let g = vars.iter().zip(xs).map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))).collect();
        (value, g)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    worst
}

/// Max relative error over every parameter entry of `module` for the scalar
/// loss built by `loss`.
pub fn check_module(
    module: &LanguageModule,
    loss: &dyn Fn(&mut Tape, &LanguageModule<Var>) -> interlingua::Result<Var>,
) -> (f64, usize) {
    let lang = module.language.clone();
    let value = |m: &LanguageModule| -> f64 {
        let mut tape = Tape::new();
        let (b, _) = m.bind(&mut tape, false);
        let l = loss(&mut tape, &b).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let (bound, vars) = module.bind(&mut tape, true);
    let l = loss(&mut tape, &bound).unwrap();
    let grads = tape.backward(l).unwrap();
    let analytic: BTreeMap<String, Tensor> = vars
        .iter()
        .map(|(n, v)| (n.clone(), grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*v)))))
        .collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = module.clone();
    for (name, g) in &analytic {
        for i in 0..g.numel() {
            let nudge = |m: &mut LanguageModule, d: f64| {
                m.visit_mut(&lang, &mut |n, t| {
                    if n == name {
                        t.data_mut()[i] += d;
                    }
                })
            };
            nudge(&mut work, FD_STEP);
            let up = value(&work);
            nudge(&mut work, -2.0 * FD_STEP);
            let down = value(&work);
            nudge(&mut work, FD_STEP);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[i], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

/// The bundled toy task prepared for training.
pub struct Toy {
    pub task: ToyTask,
    pub x: LanguageData,
    pub y: LanguageData,
    pub z: LanguageData,
    pub xy: ParallelCorpus,
    pub xz: ParallelCorpus,
    pub zy: ParallelCorpus,
}

pub fn toy(pairs: usize, seed: u64) -> Toy {
    let task = ToyTask::generate(pairs, seed);
    let learn = |lang, lines: &[String]| LanguageData::learn(lang, lines, 100, 512).unwrap();
    let (x, y, z) = (learn("x", &task.x), learn("y", &task.y), learn("z", &task.z));
    let pair = |a: &[String], b: &[String], da: &LanguageData, db: &LanguageData| {
        ParallelCorpus::from_lines(a, b, da, db, FilterOptions::default()).unwrap()
    };
    let xy = pair(&task.x, &task.y, &x, &y);
    let xz = pair(&task.x, &task.z, &x, &z);
    let zy = pair(&task.z, &task.y, &z, &y);
    Toy { task, x, y, z, xy, xz, zy }
}

pub fn toy_system(toy: &Toy, model: &ModelConfig, cfg: &TrainConfig) -> System {
    let langs = [
        ("x", toy.x.vocab.len(), toy.x.vocab.content_hash()),
        ("y", toy.y.vocab.len(), toy.y.vocab.content_hash()),
    ];
    init_system(model, cfg, &langs).unwrap()
}

/// Trains a fresh X/Y system and returns it with every step record.
pub fn run(toy: &Toy, model: &ModelConfig, cfg: &TrainConfig, steps: u64) -> (System, TrainState, Vec<StepRecord>) {
    let mut system = toy_system(toy, model, cfg);
    let mut state = TrainState::default();
    let mut log = Vec::new();
    train(&mut system, &mut state, &toy.xy, cfg, steps, &Frozen::default(), |_, _, r| {
        log.push(r.clone());
        Ok(())
    })
    .unwrap();
    (system, state, log)
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig { num_blocks: 2, num_heads: 2, d_model: 8, d_ff: 16, vocab_size: 16, max_len: 12, dropout: 0.0 }
}

/// Snapshot of every parameter whose name starts with `prefix`.
pub fn params_with_prefix(system: &System, prefix: &str) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    system.visit_params(&mut |n, t| {
        if n.starts_with(prefix) {
            out.insert(n.to_string(), t.clone());
        }
    });
    out
}
