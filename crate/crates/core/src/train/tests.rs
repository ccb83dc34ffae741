use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::lowering::ConvSpec;

fn blobs(n: usize, dims: usize, seed: u64) -> Dataset {
    let mut r = keyed(&[seed]);
    let noise = Normal::new(0.0f32, 0.08).unwrap();
    let mut x = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        for d in 0..dims {
            let center = if (d % 2 == 0) == (c == 0) { 0.25 } else { 0.75 };
            x.push((center + noise.sample(&mut r)).clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset::new(Tensor::from_f32(vec![n, dims], x).unwrap(), labels, 2).unwrap()
}

fn dense_model(dims: &[usize], seed: u64) -> Model {
    let mut r = keyed(&[seed]);
    let layers = dims.windows(2).map(|w| Layer::dense(w[0], w[1], &mut r).unwrap()).collect();
    Model::new(layers, *dims.last().unwrap()).unwrap()
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let data = blobs(64, 6, 1);
    let mut model = dense_model(&[6, 4, 2], 2);
    let before = model.clone();
    let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
    train_model(&mut model, &data, None, &mut Backend::software(&ChipConfig::default()), &cfg, |_| {}).unwrap();
    assert_eq!(model, before);
}

#[test]
fn separable_blobs_are_learned() {
    let data = blobs(400, 8, 3);
    let mut model = dense_model(&[8, 2], 4);
    let cfg = TrainConfig { epochs: 20, lr: 0.1, batch_size: 32, seed: 5, ..TrainConfig::default() };
    let mut backend = Backend::software(&ChipConfig::default());
    let metrics = train_model(&mut model, &data, None, &mut backend, &cfg, |_| {}).unwrap();
    assert_eq!(metrics.len(), 20);
    let acc = evaluate(&model, &data, &mut backend, 0).unwrap().accuracy;
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn relu_blocks_gradient_of_inactive_units() {
    let mut r = keyed(&[9]);
    let mut model = dense_model(&[4, 3, 2], 9);
    // unit 0 of the hidden layer can never fire
    let mut w = model.layers[0].weights.as_f32().unwrap().to_vec();
    for k in 0..4 {
        w[k * 3] = -1.0;
    }
    model.layers[0].weights = Tensor::from_f32(vec![4, 3], w).unwrap();
    let x: Vec<f32> = (0..8 * 4).map(|_| r.random_range(0.1..1.0)).collect();
    let mut backend = Backend::software(&ChipConfig::noiseless(1.0 / 64.0));
    let (z, caches) = model.forward(&x, 8, &mut backend, false, &[0]).unwrap();
    let labels = vec![0, 1, 0, 1, 0, 1, 0, 1];
    let (_, grad, _) = softmax_ce(&z, &labels, 2);
    let grads = model.backward(&caches, 8, grad).unwrap();
    let g0 = grads[0].as_f32().unwrap();
    assert!((0..4).all(|k| g0[k * 3] == 0.0));
    assert!(g0.iter().any(|&v| v != 0.0));
}

#[test]
fn conv_model_gradients_match_finite_differences() {
    // float model: quantization is bypassed by differentiating the exact
    // product the backward pass assumes
    let spec = ConvSpec::conv1d(2, 3, 3, 2, 11).unwrap();
    let mut r = keyed(&[11]);
    let conv = Layer::conv1d(&spec, None, true, &mut r).unwrap();
    let dense = Layer::dense(conv.output_len(), 2, &mut r).unwrap();
    let model = Model::new(vec![conv, dense], 2).unwrap();
    let batch = 2;
    let x: Vec<f32> = (0..batch * 22).map(|_| r.random_range(0.0..1.0)).collect();
    let c: Vec<f64> = (0..batch * 2).map(|_| r.random_range(-1.0..1.0)).collect();

    let loss = |m: &Model| -> f64 {
        let mut h: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        for (l, layer) in m.layers.iter().enumerate() {
            let (shape, imap) = layer.input_map(batch).unwrap();
            let w = layer.weight_matrix().unwrap();
            let wv = w.as_f32().unwrap();
            let (rows, n, cols) = (shape[0], shape[1], w.dim(1));
            let xm: Vec<f64> = imap.iter().map(|i| i.map_or(0.0, |i| h[i])).collect();
            let mut y = vec![0f64; rows * cols];
            for i in 0..rows {
                for k in 0..n {
                    for j in 0..cols {
                        y[i * cols + j] += xm[i * n + k] * wv[k * cols + j] as f64;
                    }
                }
            }
            let omap = layer.output_map(batch, rows, cols).unwrap();
            h = omap.iter().map(|&i| y[i]).collect();
            if l == 0 {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h.iter().zip(&c).map(|(a, b)| a * b).sum()
    };

    // analytic: run the backward pass on caches of a float forward
    let caches: Vec<Cache> = {
        let mut h: Vec<f32> = x.clone();
        let mut out = Vec::new();
        for (l, layer) in model.layers.iter().enumerate() {
            let (shape, input_map) = layer.input_map(batch).unwrap();
            let xm = Tensor::from_f32(shape.clone(), input_map.iter().map(|i| i.map_or(0.0, |i| h[i])).collect()).unwrap();
            let w = layer.weight_matrix().unwrap();
            let y = crate::matmul::matmul_f32(&xm, &w).unwrap();
            let output_map = layer.output_map(batch, shape[0], w.dim(1)).unwrap();
            let mut o: Vec<f32> = output_map.iter().map(|&i| y.as_f32().unwrap()[i]).collect();
            if l == 0 {
                o.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = o.clone();
            out.push(Cache { saved: SavedState { x: xm, y }, w, input_map, output_map, out: o });
        }
        out
    };
    let grads = model.backward(&caches, batch, c.iter().map(|&v| v as f32).collect()).unwrap();

    for (l, g) in grads.iter().enumerate() {
        for (i, &ga) in g.as_f32().unwrap().iter().enumerate() {
            let eps = 1e-3f32;
            let mut plus = model.clone();
            let mut minus = model.clone();
            let mut wp = plus.layers[l].weights.as_f32().unwrap().to_vec();
            let mut wm = wp.clone();
            let base = wp[i];
            wp[i] = base + eps;
            wm[i] = base - eps;
            let delta = (wp[i] - wm[i]) as f64;
            plus.layers[l].weights = Tensor::from_f32(plus.layers[l].weights.shape().to_vec(), wp).unwrap();
            minus.layers[l].weights = Tensor::from_f32(minus.layers[l].weights.shape().to_vec(), wm).unwrap();
            let fd = (loss(&plus) - loss(&minus)) / delta;
            let err = (fd - ga as f64).abs() / fd.abs().max(ga.abs() as f64).max(1e-2);
            assert!(err < 1e-3, "layer {l} weight {i}: fd {fd} analytic {ga}");
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ConvSpec::conv1d(2, 4, 3, 2, 15).unwrap();
    let mut r = keyed(&[1]);
    let conv = Layer::conv1d(&spec, Some(5), true, &mut r).unwrap();
    let dense = Layer::dense(20, 3, &mut r).unwrap();
    let mut model = Model::new(vec![conv, dense], 3).unwrap();
    model.normalizer = Some(Normalizer { min: vec![0.0, -1.0], max: vec![1.0, 1.0] });
    save_checkpoint(&model, dir.path()).unwrap();
    assert_eq!(load_checkpoint(dir.path()).unwrap(), model);
    assert!(matches!(load_checkpoint(dir.path().join("nope")), Err(Error::MissingFile(_))));
}

#[test]
fn har_model_shapes() {
    let m = har_model(0).unwrap();
    assert_eq!(m.layers.iter().map(|l| l.output_len()).collect::<Vec<_>>(), vec![256, 125, 6]);
    let x = Tensor::from_f32(vec![2, 9, 128], vec![0.5; 2 * 9 * 128]).unwrap();
    let z = m.logits(&x, &mut Backend::software(&ChipConfig::default()), &[0]).unwrap();
    assert_eq!(z.shape(), &[2, 6]);
}

#[test]
fn model_rejects_mismatched_layers() {
    let mut r = keyed(&[0]);
    let layers = vec![Layer::dense(4, 3, &mut r).unwrap(), Layer::dense(5, 2, &mut r).unwrap()];
    assert!(matches!(Model::new(layers, 2), Err(Error::ShapeMismatch(_))));
}
