use serde::{Deserialize, Serialize};

use crate::datagen::ClientDataset;
use crate::error::{contract, Error, Result};
use crate::model::{classification_accuracy, run_local_epochs, Freeze, LocalTraining, SplitParams};
use crate::numerics::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewClientPrediction {
    /// Predicted probability of label 1 per test sample.
    pub probabilities: Vec<f64>,
    pub labels: Vec<f64>,
    pub accuracy: f64,
}

impl NewClientPrediction {
    fn from_probabilities(probabilities: Vec<f64>, y: &[f64]) -> Self {
        let labels = probabilities.iter().map(|&p| if p > 0.5 { 1.0 } else { 0.0 }).collect();
        let accuracy = classification_accuracy(&probabilities, y);
        Self { probabilities, labels, accuracy }
    }
}

/// LocalTrain: fresh personalized rows, `opts.epochs` local epochs, evaluate.
///
/// With `freeze_shared` the shared rows, non-split layers and head keep the
/// server's values exactly. `opts.epochs = 0` evaluates the fresh model.
pub fn predict_new_client_localtrain(
    server: &SplitParams,
    client: &ClientDataset,
    opts: &LocalTraining,
    freeze_shared: bool,
    rng: &mut RngStream,
) -> Result<NewClientPrediction> {
    if client.n_train() == 0 {
        return Err(Error::Data(format!(
            "new client {} has no training data; use the ensemble strategy instead",
            client.client_id
        )));
    }
    if client.n_test() == 0 {
        return Err(Error::Data(format!("new client {} has no test data", client.client_id)));
    }
    let mut params = server.clone();
    params.client_id = Some(client.client_id);
    let sd = params.config.init_scale;
    let mut init_rng = rng.child("personal-init", 0);
    for l in params.split_layers() {
        let rows = params.partitions[l].as_ref().expect("split layer").personal.clone();
        for j in rows {
            let fresh = init_rng.normal_vec(params.hidden[l].cols(), sd);
            params.hidden[l].set_row(j, &fresh);
        }
    }
    if opts.epochs > 0 {
        let freeze = if freeze_shared { Freeze::Shared } else { Freeze::Nothing };
        let mut train_rng = rng.child("local-train", 0);
        params = run_local_epochs(&params, &client.x_train, &client.y_train, opts, freeze, &mut train_rng)?.params;
    }
    let p = params.predict_proba(&client.x_test)?;
    Ok(NewClientPrediction::from_probabilities(p, &client.y_test))
}

/// Ensemble: average the existing models' probabilities; label 1 iff the mean exceeds 0.5.
pub fn predict_new_client_ensemble(models: &[SplitParams], client: &ClientDataset) -> Result<NewClientPrediction> {
    if models.is_empty() {
        return Err(contract("ensemble needs at least one model"));
    }
    if client.n_test() == 0 {
        return Err(Error::Data(format!("new client {} has no test data", client.client_id)));
    }
    let mut mean = vec![0.0; client.n_test()];
    for m in models {
        for (acc, p) in mean.iter_mut().zip(m.predict_proba(&client.x_test)?) {
            *acc += p;
        }
    }
    let k = models.len() as f64;
    mean.iter_mut().for_each(|p| *p /= k);
    Ok(NewClientPrediction::from_probabilities(mean, &client.y_test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facsplit::Partition;
    use crate::model::{init_params, LossKind, ModelConfig};
    use crate::numerics::{derive_rng_stream, DenseMatrix};

    fn server() -> SplitParams {
        let cfg = ModelConfig::single_hidden(3, 6, LossKind::BinaryCrossEntropy);
        let mut p = init_params(&cfg, &[0], &mut derive_rng_stream(3, &[])).unwrap();
        p.set_partition(Partition::from_zeta(0, vec![true, true, false, false, true, false])).unwrap();
        p
    }

    fn client(n_train: usize) -> ClientDataset {
        let mut rng = derive_rng_stream(4, &[]);
        let x = DenseMatrix::from_fn(n_train, 3, |_, _| rng.normal());
        let y = (0..n_train).map(|i| (i % 2) as f64).collect();
        let xt = DenseMatrix::from_fn(5, 3, |_, _| rng.normal());
        ClientDataset::new(9, x, y, xt, vec![1.0, 0.0, 1.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn frozen_localtrain_keeps_shared_rows() {
        let s = server();
        let opts = LocalTraining { epochs: 3, batch_size: 4, lr: 0.5 };
        let mut rng = derive_rng_stream(5, &[]);
        let before = s.clone();
        let pred = predict_new_client_localtrain(&s, &client(10), &opts, true, &mut rng).unwrap();
        assert_eq!(s, before);
        assert_eq!(pred.probabilities.len(), 5);
        assert!((0.0..=1.0).contains(&pred.accuracy));
    }

    #[test]
    fn zero_epochs_is_the_fresh_baseline() {
        let s = server();
        let opts = LocalTraining { epochs: 0, batch_size: 4, lr: 0.5 };
        let a = predict_new_client_localtrain(&s, &client(10), &opts, true, &mut derive_rng_stream(6, &[])).unwrap();
        let b = predict_new_client_localtrain(&s, &client(10), &opts, true, &mut derive_rng_stream(6, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_training_split_points_to_ensemble() {
        let opts = LocalTraining { epochs: 1, batch_size: 4, lr: 0.5 };
        let err = predict_new_client_localtrain(&server(), &client(0), &opts, true, &mut derive_rng_stream(0, &[]))
            .unwrap_err();
        assert!(err.to_string().contains("ensemble"));
    }

    #[test]
    fn single_model_ensemble_is_that_model() {
        let s = server();
        let c = client(4);
        let e = predict_new_client_ensemble(std::slice::from_ref(&s), &c).unwrap();
        assert_eq!(e.probabilities, s.predict_proba(&c.x_test).unwrap());
    }

    #[test]
    fn exact_half_is_label_zero() {
        let p = NewClientPrediction::from_probabilities(vec![(0.9 + 0.1) / 2.0], &[1.0]);
        assert_eq!(p.labels, vec![0.0]);
        assert_eq!(p.accuracy, 0.0);
    }
}
