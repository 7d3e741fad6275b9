//! Central finite-difference checks for every tape operation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn loss_value(store: &ParamStore, build: &dyn Fn(&mut Tape) -> Var) -> f64 {
    let mut tape = Tape::new(store);
    let l = build(&mut tape);
    tape.scalar(l)
}

fn check_gradients(store: &mut ParamStore, build: &dyn Fn(&mut Tape) -> Var) {
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new(store);
        let l = build(&mut tape);
        let grads = tape.backward(l);
        store
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.get(id).len()])
            })
            .collect()
    };
    let h = 1e-5;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let up = loss_value(store, build);
            store.get_mut(id).data_mut()[j] = orig - h;
            let down = loss_value(store, build);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.index()][j];
            let err = (a - numeric).abs();
            let rel = err / a.abs().max(numeric.abs()).max(1e-12);
            assert!(
                err < 1e-7 || rel < 1e-5,
                "{}[{j}]: analytic {a} vs numeric {numeric}",
                store.name(id)
            );
        }
    }
}

fn input(data: Vec<f64>, shape: Vec<usize>, store: &mut ParamStore, name: &str) -> ParamId {
    store.add(name, Tensor::new(shape, data))
}

fn wave(n: usize, freq: f64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * freq + 0.3).sin()).collect()
}

#[test]
fn conv_batchnorm_pool_upsample_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let x = input(wave(2 * 2 * 6 * 6, 0.71), vec![2, 2, 6, 6], &mut store, "x");
    let conv = Conv2d::new(&mut store, "conv", 2, 3, 3, 2, 1, &mut rng);
    let gamma = store.add("gamma", Tensor::new(vec![3], vec![1.1, 0.9, 1.3]));
    let beta = store.add("beta", Tensor::new(vec![3], vec![0.1, -0.2, 0.05]));
    let conv2 = Conv2d::new(&mut store, "conv2", 3, 2, 3, 1, 1, &mut rng);
    let lin = Linear::new(&mut store, "lin", 2 * 3 * 3, 4, &mut rng);
    let target: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
    check_gradients(&mut store, &|tape| {
        let xv = tape.param(x);
        let y = conv.forward(tape, xv);
        let (y, _) = tape.batch_normalize(y, 1e-5);
        let g = tape.param(gamma);
        let b = tape.param(beta);
        let y = tape.channel_mul(y, g);
        let y = tape.channel_add(y, b);
        let y = tape.tanh(y);
        let y = tape.upsample2x(y);
        let y = conv2.forward(tape, y);
        let y = tape.maxpool2x2(y);
        let y = tape.channel_affine_const(y, vec![0.5, 2.0], &[0.1, -0.1]);
        let y = tape.reshape(y, vec![2, 18]);
        let y = lin.forward(tape, y);
        tape.sigmoid_bce(y, target.clone())
    });
}

#[test]
fn lstm_concat_slice_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let steps: Vec<ParamId> = (0..3)
        .map(|t| input(wave(2 * 3, 0.4 + t as f64), vec![2, 3], &mut store, "x"))
        .collect();
    let fwd = LstmCell::new(&mut store, "fwd", 3, 2, &mut rng);
    let bwd = LstmCell::new(&mut store, "bwd", 3, 2, &mut rng);
    let head = Linear::new(&mut store, "head", 4, 3, &mut rng);
    let target = wave(3 * 2 * 3, 1.3);
    check_gradients(&mut store, &|tape| {
        let xs: Vec<Var> = steps.iter().map(|p| tape.param(*p)).collect();
        let f = fwd.run(tape, &xs, false);
        let b = bwd.run(tape, &xs, true);
        let outs: Vec<Var> = f
            .iter()
            .zip(&b)
            .map(|(f, b)| {
                let h = tape.concat_cols(&[*f, *b]);
                let h = tape.relu(h);
                head.forward(tape, h)
            })
            .collect();
        let all = tape.concat_cols(&outs);
        tape.squared_error(all, target.clone(), 2.0)
    });
}

#[test]
fn losses_and_elementwise_ops() {
    let mut store = ParamStore::new();
    let mu = input(wave(6, 0.9), vec![2, 3], &mut store, "mu");
    let ls = input(wave(6, 1.7).iter().map(|v| v * 0.5).collect(), vec![2, 3], &mut store, "ls");
    let logits = input(wave(6, 2.3), vec![2, 3], &mut store, "logits");
    for form in [KlForm::Sigma, KlForm::Standard] {
        check_gradients(&mut store, &|tape| {
            let m = tape.param(mu);
            let l = tape.param(ls);
            let kl = tape.kl_div(m, l, form);
            let e = tape.exp(l);
            let p = tape.mul(e, m);
            let d = tape.sub(p, m);
            let s = tape.scale(d, 0.7);
            let q = tape.sigmoid(s);
            let sum = tape.sum_all(q);
            let z = tape.param(logits);
            let z = tape.add(z, s);
            let ce = tape.softmax_cross_entropy(z, vec![2, 0]);
            tape.weighted_sum(&[(kl, 0.5), (sum, 1.0), (ce, 2.0)])
        });
    }
}
