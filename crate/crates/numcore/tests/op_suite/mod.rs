//! Finite-difference checks for every differentiable tape op and layer.
//! Each entry is the worst relative error over five random instances, so the
//! same suite backs both the unit tests and the acceptance run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use t2td_numcore::nn::{LayerNorm, Linear, MultiHeadAttention, TransformerBlock, LEAKY_SLOPE};
use t2td_numcore::{grad_check, grad_check_params, ParamStore, Result, Tape, Tensor, Var};

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 5;

/// Reduces an arbitrary output to a scalar through fixed random weights so every
/// output coordinate contributes to the checked gradient.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = t.constant(Tensor::randn(t.shape(y), 1.0, &mut rng));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

#[derive(Default)]
pub struct Suite {
    pub results: Vec<(String, f64)>,
}

impl Suite {
    fn record(&mut self, name: &str, err: Result<f64>) {
        let e = err.unwrap_or(f64::INFINITY);
        match self.results.iter_mut().find(|r| r.0 == name) {
            Some(r) => r.1 = r.1.max(e),
            None => self.results.push((name.to_string(), e)),
        }
    }

    /// Checks `f` with respect to its input at five random points.
    fn unary(&mut self, name: &str, shape: &[usize], f: impl Fn(&mut Tape, Var) -> Result<Var>) {
        for s in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(s * 31 + 7);
            let point = Tensor::randn(shape, 1.0, &mut rng);
            let err = grad_check(
                |t, x| {
                    let y = f(t, x)?;
                    project(t, y, s)
                },
                &point,
                EPS,
            );
            self.record(name, err);
        }
    }

    pub fn failures(&self) -> Vec<&(String, f64)> {
        self.results.iter().filter(|r| r.1.is_nan() || r.1 >= TOL).collect()
    }
}

fn elementwise(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let other = Tensor::randn(&[3, 4], 1.0, &mut rng);
    s.unary("add", &[3, 4], |t, x| {
        let o = t.constant(other.clone());
        t.add(x, o)
    });
    s.unary("sub", &[3, 4], |t, x| {
        let o = t.constant(other.clone());
        t.sub(o, x)
    });
    s.unary("mul", &[3, 4], |t, x| {
        let o = t.constant(other.clone());
        t.mul(x, o)
    });
    s.unary("mul self", &[3, 4], |t, x| t.mul(x, x));
    s.unary("scale", &[3, 4], |t, x| Ok(t.scale(x, -2.5)));
    s.unary("neg", &[3, 4], |t, x| Ok(t.neg(x)));
    s.unary("leaky_relu", &[3, 4], |t, x| Ok(t.leaky_relu(x, LEAKY_SLOPE)));
    s.unary("sigmoid", &[3, 4], |t, x| Ok(t.sigmoid(x)));
    let bias = Tensor::randn(&[4], 1.0, &mut rng);
    s.unary("add_row x", &[3, 4], |t, x| {
        let b = t.constant(bias.clone());
        t.add_row(x, b)
    });
    s.unary("add_row bias", &[4], |t, b| {
        let x = t.constant(other.clone());
        t.add_row(x, b)
    });
}

fn matmuls(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let right = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let left = Tensor::randn(&[3, 3], 1.0, &mut rng);
    s.unary("matmul lhs", &[3, 3], |t, x| {
        let b = t.constant(right.clone());
        t.matmul(x, b)
    });
    s.unary("matmul rhs", &[3, 3], |t, x| {
        let a = t.constant(left.clone());
        t.matmul(a, x)
    });
    let other = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let wide = Tensor::randn(&[2, 4], 1.0, &mut rng);
    s.unary("matmul_t aT b", &[4, 3], |t, x| {
        let o = t.constant(other.clone());
        t.matmul_t(x, true, o, false)
    });
    s.unary("matmul_t a bT", &[4, 3], |t, x| {
        let o = t.constant(other.clone());
        t.matmul_t(x, false, o, true)
    });
    s.unary("matmul_t aT bT", &[4, 3], |t, x| {
        let w = t.constant(wide.clone());
        t.matmul_t(x, true, w, true)
    });
}

fn normalizations(s: &mut Suite) {
    s.unary("softmax_rows", &[3, 5], |t, x| t.softmax_rows(x));
    s.unary("log_softmax_rows", &[3, 5], |t, x| t.log_softmax_rows(x));
    s.unary("l2_normalize_rows", &[3, 5], |t, x| t.l2_normalize_rows(x));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let other = Tensor::randn(&[3, 5], 1.0, &mut rng);
    s.unary("cosine_similarity", &[3, 5], |t, x| {
        let o = t.constant(other.clone());
        t.cosine_similarity(x, o)
    });
    let g = Tensor::randn(&[5], 1.0, &mut rng);
    let b = Tensor::randn(&[5], 1.0, &mut rng);
    s.unary("layer_norm x", &[3, 5], |t, x| {
        let (gg, bb) = (t.constant(g.clone()), t.constant(b.clone()));
        t.layer_norm(x, gg, bb, 1e-5)
    });
    s.unary("layer_norm gamma", &[5], |t, gg| {
        let (x, bb) = (t.constant(other.clone()), t.constant(b.clone()));
        t.layer_norm(x, gg, bb, 1e-5)
    });
    s.unary("layer_norm beta", &[5], |t, bb| {
        let (x, gg) = (t.constant(other.clone()), t.constant(g.clone()));
        t.layer_norm(x, gg, bb, 1e-5)
    });
}

fn reductions_and_structure(s: &mut Suite) {
    s.unary("sum", &[2, 3], |t, x| Ok(t.sum(x)));
    s.unary("mean", &[2, 3], |t, x| Ok(t.mean(x)));
    s.unary("sum_squares", &[2, 3], |t, x| Ok(t.sum_squares(x)));
    s.unary("l2_norm", &[2, 3], |t, x| Ok(t.l2_norm(x)));
    s.unary("row_sum", &[2, 3], |t, x| t.row_sum(x));
    s.unary("weighted_row_sum", &[3, 4], |t, x| {
        t.weighted_row_sum(x, &[0.5, -1.5, 2.0])
    });
    s.unary("mean_pool", &[4, 3], |t, x| t.mean_pool(x, &[true, false, true, true]));
    s.unary("transpose", &[2, 3], |t, x| t.transpose(x));
    s.unary("reshape", &[2, 3], |t, x| t.reshape(x, &[3, 2]));
    s.unary("gather", &[2, 3], |t, x| t.gather(x, &[0, 4, 4, 5]));
    s.unary("slice_cols", &[3, 4], |t, x| t.slice_cols(x, 1, 3));
    s.unary("slice_rows", &[4, 3], |t, x| t.slice_rows(x, 1, 3));
    s.unary("repeat_rows", &[1, 3], |t, x| t.repeat_rows(x, 4));
    s.unary("concat rows", &[2, 3], |t, x| {
        let y = t.scale(x, 2.0);
        t.concat(&[x, y, x], 0)
    });
    s.unary("concat cols", &[2, 3], |t, x| {
        let y = t.sigmoid(x);
        t.concat(&[y, x], 1)
    });
    s.unary("embedding", &[5, 3], |t, x| t.embedding(x, &[4, 0, 4, 2]));
}

fn conv3d(s: &mut Suite) {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
        let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 2, 4, 4, 4], 0.5, &mut rng);
        let b = Tensor::randn(&[3], 0.5, &mut rng);
        let err = grad_check(
            |t, xv| {
                let (kk, bb) = (t.constant(k.clone()), t.constant(b.clone()));
                let y = t.conv3d(xv, kk, Some(bb), 2, 1)?;
                project(t, y, i)
            },
            &x,
            EPS,
        );
        s.record("conv3d input", err);
        let err = grad_check(
            |t, kv| {
                let (xx, bb) = (t.constant(x.clone()), t.constant(b.clone()));
                let y = t.conv3d(xx, kv, Some(bb), 2, 1)?;
                project(t, y, i)
            },
            &k,
            EPS,
        );
        s.record("conv3d kernels", err);
        let err = grad_check(
            |t, bv| {
                let (xx, kk) = (t.constant(x.clone()), t.constant(k.clone()));
                let y = t.conv3d(xx, kk, Some(bv), 2, 1)?;
                project(t, y, i)
            },
            &b,
            EPS,
        );
        s.record("conv3d bias", err);
    }
}

fn layers(s: &mut Suite) {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + i);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, false, &mut rng).unwrap();
        let kv = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let q = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let mask = [true, false, true];
        let err = grad_check(
            |t, qv| {
                let k = t.constant(kv.clone());
                let y = mha.forward(t, &store, qv, k, k, Some(&mask))?;
                project(t, y, i)
            },
            &q,
            EPS,
        );
        s.record("attention query", err);
        let err = grad_check(
            |t, kv| {
                let qq = t.constant(q.clone());
                let y = mha.forward(t, &store, qq, kv, kv, None)?;
                project(t, y, i)
            },
            &kv,
            EPS,
        );
        s.record("attention keys and values", err);
        let coords: Vec<_> = store.ids().flat_map(|id| [(id, 0), (id, 5)]).collect();
        let err = grad_check_params(&mut store, &coords, EPS, |t, st| {
            let (qq, k) = (t.constant(q.clone()), t.constant(kv.clone()));
            let y = mha.forward(t, st, qq, k, k, None)?;
            project(t, y, i)
        });
        s.record("attention parameters", err);

        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "blk", 8, 2, 16, false, &mut rng).unwrap();
        let lin = Linear::new(&mut store, "lin", 8, 3, &mut rng).unwrap();
        let ln = LayerNorm::new(&mut store, "ln", 3).unwrap();
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let ctx = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let coords: Vec<_> = store.ids().map(|id| (id, 1)).collect();
        let err = grad_check_params(&mut store, &coords, EPS, |t, st| {
            let xx = t.constant(x.clone());
            let c = t.constant(ctx.clone());
            let h = block.forward_self(t, st, xx, Some(&[true, true, true, false, true]))?;
            let h = block.forward_cross(t, st, h, c)?;
            let h = lin.forward(t, st, h)?;
            let h = ln.forward(t, st, h)?;
            project(t, h, i)
        });
        s.record("transformer block, linear, layer norm", err);
    }
}

/// Runs every check.
pub fn run() -> Suite {
    let mut s = Suite::default();
    elementwise(&mut s);
    matmuls(&mut s);
    normalizations(&mut s);
    reductions_and_structure(&mut s);
    conv3d(&mut s);
    layers(&mut s);
    s
}
