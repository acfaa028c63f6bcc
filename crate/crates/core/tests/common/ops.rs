//! Finite-difference cases for every differentiable tensor operation.

use mixup_core::tensor::{cross_entropy_soft, finite_diff_check, Rng, Tensor};
use mixup_core::Result;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

fn randn(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal() * scale).collect()
}

/// Reduces any output to a scalar with fixed random weights so every output
/// coordinate contributes a distinct gradient.
fn project(out: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = Rng::new(seed ^ 0xABCD);
    let w = Tensor::new(randn(&mut rng, out.numel(), 1.0), out.shape().to_vec())?;
    Ok(out.mul(&w)?.sum())
}

pub fn check<F>(name: &'static str, params: impl Fn(&mut Rng) -> Vec<(Vec<f64>, Vec<usize>)>, f: F) -> (&'static str, f64)
where
    F: Fn(&[Tensor], u64) -> Result<Tensor>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(seed * 7919 + 11);
        let p = params(&mut rng);
        let report = finite_diff_check(|t| project(&f(t, seed)?, seed), &p, STEP, TOL).unwrap();
        worst = worst.max(report.max_error);
    }
    (name, worst)
}

pub fn one(shape: &[usize]) -> impl Fn(&mut Rng) -> Vec<(Vec<f64>, Vec<usize>)> + '_ {
    move |rng| vec![(randn(rng, shape.iter().product(), 1.0), shape.to_vec())]
}

pub fn two<'a>(a: &'a [usize], b: &'a [usize]) -> impl Fn(&mut Rng) -> Vec<(Vec<f64>, Vec<usize>)> + 'a {
    move |rng| {
        vec![
            (randn(rng, a.iter().product(), 1.0), a.to_vec()),
            (randn(rng, b.iter().product(), 1.0), b.to_vec()),
        ]
    }
}

pub fn elementwise() -> Vec<(&'static str, f64)> {
    vec![
    check("add", two(&[3, 4], &[3, 4]), |t, _| t[0].add(&t[1])),
    check("sub", two(&[3, 4], &[3, 4]), |t, _| t[0].sub(&t[1])),
    check("mul", two(&[3, 4], &[3, 4]), |t, _| t[0].mul(&t[1])),
    check("scale", one(&[5]), |t, _| Ok(t[0].scale(-0.37))),
    check("mul self", one(&[6]), |t, _| t[0].mul(&t[0]))
    ]
}

pub fn reductions_and_shapes() -> Vec<(&'static str, f64)> {
    vec![
    check("sum", one(&[2, 3]), |t, _| Ok(t[0].sum())),
    check("mean", one(&[2, 3]), |t, _| Ok(t[0].mean())),
    check("reshape", one(&[2, 6]), |t, _| t[0].reshape(vec![3, 4])),
    check("permute", one(&[2, 3, 4]), |t, _| t[0].permute(&[2, 0, 1])),
    check("transpose", one(&[2, 3, 4]), |t, _| t[0].transpose_last2()),
    check("index_select", one(&[4, 3]), |t, _| t[0].index_select(0, &[2, 2, 0, 3, 1])),
    check("index_select axis 1", one(&[2, 4, 3]), |t, _| t[0].index_select(1, &[3, 0, 0]))
    ]
}

pub fn products() -> Vec<(&'static str, f64)> {
    vec![
    check("matmul", two(&[3, 4], &[4, 5]), |t, _| t[0].matmul(&t[1])),
    check("bmm", two(&[2, 3, 4], &[2, 4, 2]), |t, _| t[0].bmm(&t[1])),
    check("add_bias", two(&[2, 3, 4], &[4]), |t, _| t[0].add_bias(&t[1])),
    check(
        "linear",
        |rng| {
            vec![
                (randn(rng, 2 * 3 * 4, 1.0), vec![2, 3, 4]),
                (randn(rng, 4 * 5, 1.0), vec![4, 5]),
                (randn(rng, 5, 1.0), vec![5]),
            ]
        },
        |t, _| t[0].linear(&t[1], &t[2]),
    )
    ]
}

pub fn nonlinearities() -> Vec<(&'static str, f64)> {
    vec![
    check("softmax last", one(&[3, 5]), |t, _| t[0].softmax(1)),
    check("softmax first", one(&[3, 5]), |t, _| t[0].softmax(0)),
    check("gelu", one(&[12]), |t, _| Ok(t[0].gelu())),
    check("tanh", one(&[12]), |t, _| Ok(t[0].tanh())),
    check("masked_softmax", one(&[2, 3, 4]), |t, _| {
        let keep = [true, true, false, true, true, false, false, false];
        t[0].masked_softmax(&keep)
    }),
    check(
        "layer_norm",
        |rng| {
            vec![
                (randn(rng, 3 * 6, 1.0), vec![3, 6]),
                (randn(rng, 6, 1.0), vec![6]),
                (randn(rng, 6, 1.0), vec![6]),
            ]
        },
        |t, _| t[0].layer_norm(&t[1], &t[2], 1e-12),
    ),
    check("dropout", one(&[4, 5]), |t, seed| {
        let mut rng = Rng::new(seed);
        t[0].dropout(0.3, &mut rng)
    })
    ]
}

pub fn embedding_table() -> Vec<(&'static str, f64)> {
    vec![
    check("embedding", one(&[6, 3]), |t, _| t[0].embedding(&[0, 5, 5, 2, 1, 0], &[2, 3]))
    ]
}

pub fn soft_cross_entropy() -> Vec<(&'static str, f64)> {
    vec![
    check("cross_entropy_soft", one(&[4, 3]), |t, seed| {
        let mut rng = Rng::new(seed + 100);
        let mut target = Vec::new();
        for _ in 0..4 {
            let raw: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
            let s: f64 = raw.iter().sum();
            target.extend(raw.iter().map(|v| v / s));
        }
        cross_entropy_soft(&t[0], &target)
    })
    ]
}

pub fn composite_attention_block() -> Vec<(&'static str, f64)> {
    vec![
    check(
        "attention",
        |rng| {
            vec![
                (randn(rng, 2 * 3 * 4, 1.0), vec![2, 3, 4]),
                (randn(rng, 4 * 4, 0.5), vec![4, 4]),
                (randn(rng, 4 * 4, 0.5), vec![4, 4]),
            ]
        },
        |t, _| {
            let q = t[0].reshape(vec![6, 4])?.matmul(&t[1])?.reshape(vec![2, 3, 4])?;
            let k = t[0].reshape(vec![6, 4])?.matmul(&t[2])?.reshape(vec![2, 3, 4])?;
            let s = q.bmm(&k.transpose_last2()?)?.scale(0.5);
            let p = s.masked_softmax(&[true, true, false, true, true, true])?;
            p.bmm(&t[0])?.gelu().layer_norm(
                &Tensor::new(vec![1.0; 4], vec![4])?,
                &Tensor::new(vec![0.0; 4], vec![4])?,
                1e-12,
            )
        },
    )
    ]
}

#[allow(dead_code)]
pub fn all() -> Vec<(&'static str, f64)> {
    [
        elementwise,
        reductions_and_shapes,
        products,
        nonlinearities,
        embedding_table,
        soft_cross_entropy,
        composite_attention_block,
    ]
    .iter()
    .flat_map(|g| g())
    .collect()
}
