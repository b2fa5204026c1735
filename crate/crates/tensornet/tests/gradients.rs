use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensornet::{
    grad_check, mse_loss, Activation, Adam, Dense, GradCheckOptions, LstmCell, Mlp, NumArray,
    ParameterStore,
};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> NumArray {
    NumArray::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap()
}

/// Weighted sum of outputs: a smooth scalar whose gradient w.r.t. the output
/// is the weight matrix itself.
fn probe_loss(y: &NumArray, probe: &NumArray) -> f64 {
    y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn dense_parameter_gradients_match_finite_differences() {
    for act in [Activation::Tanh, Activation::Identity, Activation::Softplus, Activation::Relu] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParameterStore::new();
        let layer = Dense::new(&mut store, "d", 8, 8, act, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 4, 8);
        let probe = random_matrix(&mut rng, 4, 8);
        let opts = GradCheckOptions {
            samples_per_param: None,
            tol: 1e-6,
            ..Default::default()
        };
        let report = grad_check(
            &mut store,
            |s, with_grad| {
                let cache = layer.forward(s, &x).unwrap();
                if with_grad {
                    layer.backward(s, &x, &cache, &probe, false).unwrap();
                }
                probe_loss(&cache.out, &probe)
            },
            opts,
        );
        assert!(report.passed(), "{act:?}: {report:?}");
    }
}

#[test]
fn dense_input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParameterStore::new();
    let layer = Dense::new(&mut store, "d", 8, 8, Activation::Tanh, &mut rng).unwrap();
    let x = random_matrix(&mut rng, 2, 8);
    let probe = random_matrix(&mut rng, 2, 8);
    let cache = layer.forward(&store, &x).unwrap();
    let dx = layer
        .backward(&mut store, &x, &cache, &probe, true)
        .unwrap()
        .unwrap();
    let eps = 1e-5;
    for i in 0..x.len() {
        let mut up = x.clone();
        let mut dn = x.clone();
        up.data_mut()[i] += eps;
        dn.data_mut()[i] -= eps;
        let fd = (probe_loss(&layer.infer(&store, &up).unwrap(), &probe)
            - probe_loss(&layer.infer(&store, &dn).unwrap(), &probe))
            / (2.0 * eps);
        let a = dx.data()[i];
        assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-6, "{a} vs {fd}");
    }
}

#[test]
fn lstm_gradients_on_three_steps() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 5, 6, &mut rng).unwrap();
        let inputs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let probe: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let opts = GradCheckOptions {
            samples_per_param: None,
            tol: 1e-5,
            seed,
            ..Default::default()
        };
        let report = grad_check(
            &mut store,
            |s, with_grad| {
                let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
                let trace = cell.forward(s, &refs).unwrap();
                let loss: f64 = trace.final_hidden().iter().zip(&probe).map(|(a, b)| a * b).sum();
                if with_grad {
                    cell.backward(s, &trace, &probe);
                }
                loss
            },
            opts,
        );
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn lstm_input_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParameterStore::new();
    let cell = LstmCell::new(&mut store, "lstm", 4, 3, &mut rng).unwrap();
    let inputs: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let probe = [0.3, -0.8, 0.5];
    let run = |inputs: &[Vec<f64>]| {
        let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
        let trace = cell.forward(&store, &refs).unwrap();
        trace.final_hidden().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
    };
    let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
    let trace = cell.forward(&store, &refs).unwrap();
    let mut scratch = store.clone();
    let dxs = cell.backward(&mut scratch, &trace, &probe);
    let eps = 1e-5;
    for t in 0..3 {
        for i in 0..4 {
            let mut up = inputs.clone();
            let mut dn = inputs.clone();
            up[t][i] += eps;
            dn[t][i] -= eps;
            let fd = (run(&up) - run(&dn)) / (2.0 * eps);
            let a = dxs[t][i];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-5);
        }
    }
}

#[test]
fn loss_decreases_on_tiny_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParameterStore::new();
    let mlp = Mlp::new(&mut store, "m", &[3, 16, 1], Activation::Tanh, Activation::Identity, &mut rng)
        .unwrap();
    let x = random_matrix(&mut rng, 32, 3);
    let y: Vec<f64> = (0..32)
        .map(|r| {
            let row = x.row(r);
            row[0] * 0.5 - row[1] * row[2] + 0.1
        })
        .collect();
    let adam = Adam::new(1e-2);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..200 {
        store.zero_grads();
        let cache = mlp.forward(&store, &x).unwrap();
        let (loss, g) = mse_loss(cache.output().data(), &y).unwrap();
        first.get_or_insert(loss);
        last = loss;
        let dy = NumArray::matrix(32, 1, g).unwrap();
        mlp.backward(&mut store, &cache, &dy, false).unwrap();
        adam.step(&mut store);
    }
    let first = first.unwrap();
    assert!(last < 0.25 * first, "{first} -> {last}");
}

#[test]
fn unfreezing_resumes_updates_without_reset() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParameterStore::new();
    let layer = Dense::new(&mut store, "enc", 2, 2, Activation::Identity, &mut rng).unwrap();
    store.set_frozen("enc", true);
    let before = store.snapshot("enc");
    let x = random_matrix(&mut rng, 3, 2);
    let probe = random_matrix(&mut rng, 3, 2);
    let adam = Adam::new(0.05);
    for _ in 0..10 {
        store.zero_grads();
        let c = layer.forward(&store, &x).unwrap();
        layer.backward(&mut store, &x, &c, &probe, false).unwrap();
        adam.step(&mut store);
    }
    assert_eq!(store.snapshot("enc"), before);
    store.set_frozen("enc", false);
    // the transition itself changes nothing
    assert_eq!(store.snapshot("enc"), before);
    store.zero_grads();
    let c = layer.forward(&store, &x).unwrap();
    layer.backward(&mut store, &x, &c, &probe, false).unwrap();
    adam.step(&mut store);
    assert_ne!(store.snapshot("enc"), before);
}
