//! Random instances of every differentiable tape operation.

use modmt::tensor::{AttentionSpec, Element, Tape, Var};
use modmt::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::Input;

pub type OpFn<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;
pub type MakeFn<T> = Box<dyn Fn(&mut ChaCha8Rng) -> Instance<T>>;

pub struct Instance<T: Element> {
    pub inputs: Vec<Input<T>>,
    pub op: OpFn<T>,
}

pub struct OpCase<T: Element> {
    pub name: &'static str,
    pub make: MakeFn<T>,
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn away_from_zero<T: Element>(mut input: Input<T>, rng: &mut ChaCha8Rng) -> Input<T> {
    for x in &mut input.data {
        while x.as_f64().abs() < 0.05 {
            *x = T::of(rng.random_range(-1.0..1.0));
        }
    }
    input
}

pub fn suite<T: Element>() -> Vec<OpCase<T>> {
    let mut cases: Vec<OpCase<T>> = Vec::new();
    cases.push(OpCase {
        name: "matmul",
        make: Box::new(|rng| {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            Instance {
                inputs: vec![Input::random(rng, &[m, k]), Input::random(rng, &[k, n])],
                op: Box::new(|t, v| t.matmul(v[0], v[1])),
            }
        }),
    });
    cases.push(OpCase {
        name: "matmul_nt",
        make: Box::new(|rng| {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            Instance {
                inputs: vec![Input::random(rng, &[2, m, k]), Input::random(rng, &[n, k])],
                op: Box::new(|t, v| t.matmul_nt(v[0], v[1])),
            }
        }),
    });
    cases.push(OpCase {
        name: "add",
        make: Box::new(|rng| {
            let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
            Instance {
                inputs: vec![Input::random(rng, &s), Input::random(rng, &s)],
                op: Box::new(|t, v| t.add(v[0], v[1])),
            }
        }),
    });
    cases.push(OpCase {
        name: "mul",
        make: Box::new(|rng| {
            let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
            Instance {
                inputs: vec![Input::random(rng, &s), Input::random(rng, &s)],
                op: Box::new(|t, v| t.mul(v[0], v[1])),
            }
        }),
    });
    cases.push(OpCase {
        name: "add_bias",
        make: Box::new(|rng| {
            let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 5));
            Instance {
                inputs: vec![Input::random(rng, &[r, c]), Input::random(rng, &[c])],
                op: Box::new(|t, v| t.add_bias(v[0], v[1])),
            }
        }),
    });
    cases.push(OpCase {
        name: "scale",
        make: Box::new(|rng| {
            let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
            let f = T::of(rng.random_range(-2.0..2.0));
            Instance {
                inputs: vec![Input::random(rng, &s)],
                op: Box::new(move |t, v| t.scale(v[0], f)),
            }
        }),
    });
    cases.push(OpCase {
        name: "relu",
        make: Box::new(|rng| {
            let s = [dim(rng, 1, 4), dim(rng, 1, 6)];
            let x = away_from_zero(Input::random(rng, &s), rng);
            Instance {
                inputs: vec![x],
                op: Box::new(|t, v| t.relu(v[0])),
            }
        }),
    });
    cases.push(OpCase {
        name: "sum",
        make: Box::new(|rng| {
            let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
            Instance {
                inputs: vec![Input::random(rng, &s)],
                op: Box::new(|t, v| t.sum(v[0])),
            }
        }),
    });
    cases.push(OpCase {
        name: "reshape",
        make: Box::new(|rng| {
            let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
            Instance {
                inputs: vec![Input::random(rng, &[a, b])],
                op: Box::new(move |t, v| t.reshape(v[0], &[b, a])),
            }
        }),
    });
    cases.push(OpCase {
        name: "softmax",
        make: Box::new(|rng| {
            let s = [dim(rng, 1, 3), dim(rng, 1, 5), dim(rng, 1, 3)];
            let axis = rng.random_range(0..3);
            let mut x = Input::random(rng, &s);
            x.data.iter_mut().for_each(|v| *v = *v * T::of(3.0));
            Instance {
                inputs: vec![x],
                op: Box::new(move |t, v| t.softmax(v[0], axis)),
            }
        }),
    });
    cases.push(OpCase {
        name: "cross_entropy",
        make: Box::new(|rng| {
            let (rows, vocab) = (dim(rng, 1, 4), dim(rng, 2, 8));
            let mut targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..vocab)).collect();
            if targets.iter().all(|&t| t == 0) {
                targets[0] = 1;
            }
            let mut x = Input::random(rng, &[rows, vocab]);
            x.data.iter_mut().for_each(|v| *v = *v * T::of(2.0));
            Instance {
                inputs: vec![x],
                op: Box::new(move |t, v| t.cross_entropy(v[0], &targets, 0)),
            }
        }),
    });
    cases.push(OpCase {
        name: "layer_norm",
        make: Box::new(|rng| {
            let (r, c) = (dim(rng, 1, 4), dim(rng, 3, 8));
            // Finite differences need a step well below each row's spread.
            let x = loop {
                let x = Input::<T>::random(rng, &[r, c]);
                let spread_ok = x.data.chunks(c).all(|row| {
                    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / c as f64;
                    var.sqrt() > 0.25
                });
                if spread_ok {
                    break x;
                }
            };
            Instance {
                inputs: vec![
                    x,
                    Input::random(rng, &[c]),
                    Input::random(rng, &[c]),
                ],
                op: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
            }
        }),
    });
    cases.push(OpCase {
        name: "dropout",
        make: Box::new(|rng| {
            let s = [dim(rng, 1, 4), dim(rng, 1, 6)];
            let seed = rng.random::<u64>();
            Instance {
                inputs: vec![Input::random(rng, &s)],
                op: Box::new(move |t, v| t.dropout(v[0], 0.3, seed, true)),
            }
        }),
    });
    cases.push(OpCase {
        name: "embedding",
        make: Box::new(|rng| {
            let (vocab, d, n) = (dim(rng, 2, 6), dim(rng, 1, 4), dim(rng, 1, 6));
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
            Instance {
                inputs: vec![Input::random(rng, &[vocab, d])],
                op: Box::new(move |t, v| t.embedding(v[0], &ids, &[1, n])),
            }
        }),
    });
    cases.push(OpCase {
        name: "attention",
        make: Box::new(|rng| {
            let batch = dim(rng, 1, 2);
            let heads = dim(rng, 1, 2);
            let d = heads * dim(rng, 1, 3);
            let causal = rng.random_bool(0.5);
            let sk = dim(rng, 1, 4);
            let sq = if causal { sk } else { dim(rng, 1, 4) };
            let mut mask: Vec<bool> = (0..batch * sk).map(|_| rng.random_bool(0.8)).collect();
            for b in 0..batch {
                mask[b * sk] = true;
            }
            let spec = AttentionSpec { heads, causal, key_mask: Some(mask) };
            let mut q = Input::random(rng, &[batch, sq, d]);
            q.data.iter_mut().for_each(|v| *v = *v * T::of(2.0));
            Instance {
                inputs: vec![q, Input::random(rng, &[batch, sk, d]), Input::random(rng, &[batch, sk, d])],
                op: Box::new(move |t, v| t.attention(v[0], v[1], v[2], &spec)),
            }
        }),
    });
    cases
}
