//! Central finite-difference oracle for tape operations.
//!
//! The oracle only reads forward values from no-grad tapes; it never touches
//! the backward rules it is checking.

use modmt::tensor::{Element, Tape, Var};
use modmt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Input<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Whether the gradient with respect to this input is checked.
    pub check: bool,
}

impl<T: Element> Input<T> {
    pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
        Input { shape: shape.to_vec(), data, check: true }
    }

    pub fn fixed(shape: &[usize], data: Vec<T>) -> Self {
        Input { shape: shape.to_vec(), data, check: false }
    }
}

pub struct CheckOutcome {
    /// Largest norm-wise relative error over the checked inputs.
    pub worst: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn projection(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Representable in f32, so both precisions project onto the same vector.
    (0..len).map(|_| rng.random_range(-1.0f64..1.0) as f32 as f64).collect()
}

fn output_len<T, F>(inputs: &[Input<T>], op: &F) -> Result<usize>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<T>::no_grad();
    let vars = inputs
        .iter()
        .map(|i| tape.input(&i.shape, i.data.clone(), false))
        .collect::<Result<Vec<_>>>()?;
    let out = op(&mut tape, &vars)?;
    Ok(tape.value(out).len())
}

/// Backward-pass gradient of `sum(op(inputs) * R)` per checked input.
pub fn analytic<T, F>(inputs: &[Input<T>], op: &F, seed: u64) -> Result<Vec<Option<Vec<f64>>>>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let proj = projection(seed, output_len(inputs, op)?);
    let mut tape = Tape::<T>::new();
    let vars = inputs
        .iter()
        .map(|i| tape.input(&i.shape, i.data.clone(), i.check))
        .collect::<Result<Vec<_>>>()?;
    let out = op(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let r = tape.input(&shape, proj.iter().map(|&x| T::of(x)).collect(), false)?;
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;
    Ok(inputs
        .iter()
        .zip(&vars)
        .map(|(input, v)| {
            input.check.then(|| match tape.grad(*v) {
                Some(g) => g.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; input.data.len()],
            })
        })
        .collect())
}

/// Central differences of step `h` of the same projected sum, computed from
/// forward values only.
pub fn numeric<T, F>(inputs: &[Input<T>], op: &F, h: f64, seed: u64) -> Result<Vec<Option<Vec<f64>>>>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let proj = projection(seed, output_len(inputs, op)?);
    let eval = |data: &[Vec<T>]| -> Result<f64> {
        let mut tape = Tape::<T>::no_grad();
        let vars = inputs
            .iter()
            .zip(data)
            .map(|(i, d)| tape.input(&i.shape, d.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = op(&mut tape, &vars)?;
        Ok(tape.value(out).iter().zip(&proj).map(|(v, r)| v.as_f64() * r).sum())
    };
    let base: Vec<Vec<T>> = inputs.iter().map(|i| i.data.clone()).collect();
    let mut grads = Vec::new();
    for (idx, input) in inputs.iter().enumerate() {
        if !input.check {
            grads.push(None);
            continue;
        }
        let mut g = vec![0.0; input.data.len()];
        for (c, slot) in g.iter_mut().enumerate() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            let x = base[idx][c];
            plus[idx][c] = x + T::of(h);
            minus[idx][c] = x - T::of(h);
            let delta = plus[idx][c].as_f64() - minus[idx][c].as_f64();
            *slot = (eval(&plus)? - eval(&minus)?) / delta;
        }
        grads.push(Some(g));
    }
    Ok(grads)
}

/// Largest norm-wise relative error between two gradient sets.
pub fn compare(analytic: &[Option<Vec<f64>>], numeric: &[Option<Vec<f64>>]) -> CheckOutcome {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let (Some(a), Some(n)) = (a, n) else { continue };
        let diff: Vec<f64> = a.iter().zip(n).map(|(a, n)| a - n).collect();
        let scale = norm(a).max(norm(n));
        let rel = if scale < 1e-12 { norm(&diff) } else { norm(&diff) / scale };
        worst = worst.max(rel);
    }
    CheckOutcome { worst }
}

/// Analytic against numeric gradient, both in the precision `T`.
pub fn check<T, F>(inputs: &[Input<T>], op: F, h: f64, seed: u64) -> Result<CheckOutcome>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    Ok(compare(&analytic(inputs, &op, seed)?, &numeric(inputs, &op, h, seed)?))
}
