use afpnet::fpm;
use afpnet::model::MeanGradient;
use afpnet::rpam;
use afpnet::{Afpnet, ModelConfig};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(blocks: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: 5,
        heights: vec![2, 3],
        kernels_per_height: 3,
        top_p: 3,
        blocks,
        heads: 2,
        ffn_hidden: Some(6),
        ..Default::default()
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        0.0
    } else {
        diff / scale
    }
}

/// Logit with the average column optionally pinned to `frozen`.
fn logit(model: &Afpnet<f64>, ids: &[usize], frozen: Option<&Array1<f64>>) -> f64 {
    let matrix = fpm::fpm_forward(ids, &model.params().fpm, model.config()).unwrap();
    let mut values: Array2<f64> = matrix.values().clone();
    if let Some(col) = frozen {
        values.column_mut(model.config().top_p).assign(col);
    }
    rpam::rpam_forward_cached(values.view(), &model.params().rpam, model.config())
        .unwrap()
        .logit
}

/// Worst per-tensor relative error between analytic and central-difference
/// gradients of the logit.
fn check(model: &mut Afpnet<f64>, ids: &[usize], mean: MeanGradient, h: f64) -> Vec<(String, f64)> {
    let pass = model.forward(ids).unwrap();
    let mut grads = model.zero_grads();
    model.backward(&pass, 1.0, &mut grads, mean);
    let frozen = match mean {
        MeanGradient::Include => None,
        MeanGradient::Stop => Some(pass.matrix.values().column(model.config().top_p).to_owned()),
    };

    let names: Vec<String> = model.params().tensors().iter().map(|t| t.name.clone()).collect();
    let mut report = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let len = model.params().tensors()[ti].data.len();
        let mut numeric = vec![0.0; len];
        for k in 0..len {
            let orig = model.params().tensors()[ti].data[k];
            model.params_mut().tensors_mut()[ti].data[k] = orig + h;
            let plus = logit(model, ids, frozen.as_ref());
            model.params_mut().tensors_mut()[ti].data[k] = orig - h;
            let minus = logit(model, ids, frozen.as_ref());
            model.params_mut().tensors_mut()[ti].data[k] = orig;
            numeric[k] = (plus - minus) / (2.0 * h);
        }
        let analytic = grads.tensors()[ti].data.to_vec();
        report.push((name.clone(), rel_err(&analytic, &numeric)));
    }
    report
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..vocab)).collect()
}

fn assert_all_close(report: &[(String, f64)]) {
    for (name, err) in report {
        assert!(*err <= 1e-3, "{name}: relative error {err:e}");
    }
}

#[test]
fn full_model_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..3 {
        let mut model = Afpnet::<f64>::init(tiny(2), 9, seed).unwrap();
        let ids = random_ids(&mut rng, 12, 9);
        assert_all_close(&check(&mut model, &ids, MeanGradient::Include, 1e-5));
    }
}

#[test]
fn gradients_with_stopped_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = Afpnet::<f64>::init(tiny(1), 9, 3).unwrap();
    let ids = random_ids(&mut rng, 10, 9);
    assert_all_close(&check(&mut model, &ids, MeanGradient::Stop, 1e-5));
}

#[test]
fn gradients_without_attention_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = Afpnet::<f64>::init(tiny(0), 7, 4).unwrap();
    let ids = random_ids(&mut rng, 9, 7);
    assert_all_close(&check(&mut model, &ids, MeanGradient::Include, 1e-5));
}

#[test]
fn short_input_with_empty_rows() {
    // length 2: height-3 kernels have no window, their rows stay zero
    let mut model = Afpnet::<f64>::init(tiny(1), 6, 5).unwrap();
    assert_all_close(&check(&mut model, &[2, 3], MeanGradient::Include, 1e-5));
}

#[test]
fn embedded_input_gradient() {
    let model = Afpnet::<f64>::init(tiny(1), 8, 11).unwrap();
    let ids = [1, 4, 2, 7, 3, 3, 5];
    let embedded = fpm::embed(&ids, &model.params().fpm.embedding).unwrap();
    let pass = model.forward_embedded(embedded.clone()).unwrap();
    let mut grads = model.zero_grads();
    let d_e = model.backward(&pass, 1.0, &mut grads, MeanGradient::Include);
    let h = 1e-5;
    let mut numeric = Array2::<f64>::zeros(embedded.raw_dim());
    for idx in ndarray::indices(embedded.raw_dim()) {
        let mut e = embedded.clone();
        e[idx] += h;
        let plus = model.forward_embedded(e.clone()).unwrap().logit();
        e[idx] -= 2.0 * h;
        let minus = model.forward_embedded(e).unwrap().logit();
        numeric[idx] = (plus - minus) / (2.0 * h);
    }
    let err = rel_err(d_e.as_slice().unwrap(), numeric.as_slice().unwrap());
    assert!(err <= 1e-3, "relative error {err:e}");
}
