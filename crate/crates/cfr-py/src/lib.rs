//! Python bindings: synthetic dataset generation, model training and
//! evaluation, explanations, and the finite-difference gradient check.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use cfr_core::data::{gen_synthetic, SampleBundle, SynthConfig, SynthData};
use cfr_core::gradcheck::grad_check;
use cfr_core::head::predict;
use cfr_core::matrix::{matmul as matmul_rs, softmax_vec, Matrix};
use cfr_core::model::{
    forward, init_params, load_checkpoint, save_checkpoint, AblationMode, CfrConfig, CfrParams,
    TextContext,
};
use cfr_core::text::build_filter;
use cfr_core::train::{batch_loss_and_grads, evaluate, train_loop, TrainConfig};
use cfr_core::CfrError;

fn err(e: CfrError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_mode(mode: &str) -> PyResult<AblationMode> {
    mode.parse::<AblationMode>().map_err(err)
}

/// A generated synthetic dataset together with its text context.
#[pyclass]
struct SynthDataset {
    data: SynthData,
    ctx: TextContext,
    cfg: SynthConfig,
}

impl SynthDataset {
    fn split(&self, name: &str) -> PyResult<&[SampleBundle]> {
        match name {
            "train" => Ok(&self.data.train),
            "val" => Ok(&self.data.val),
            other => Err(PyValueError::new_err(format!("unknown split '{other}'"))),
        }
    }
}

#[pymethods]
impl SynthDataset {
    #[new]
    #[pyo3(signature = (
        objects = 12, attrs = 6, emb_dim = 32, scene_min = 2, scene_max = 3,
        noise = 0.05, dropout = 0.1, ghost_rate = 0.5,
        train_n = 2000, val_n = 500, seed = 7, min_freq = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        objects: usize,
        attrs: usize,
        emb_dim: usize,
        scene_min: usize,
        scene_max: usize,
        noise: f64,
        dropout: f64,
        ghost_rate: f64,
        train_n: usize,
        val_n: usize,
        seed: u64,
        min_freq: usize,
    ) -> PyResult<Self> {
        let cfg = SynthConfig {
            objects,
            attrs,
            emb_dim,
            scene_min,
            scene_max,
            noise,
            dropout,
            ghost_rate,
            train_n,
            val_n,
            seed,
        };
        let data = gen_synthetic(&cfg).map_err(err)?;
        let ctx = TextContext {
            question_filter: build_filter(&data.stop_words, &data.vocab, min_freq),
            vocab: data.vocab.clone(),
            table: data.table.clone(),
        };
        Ok(SynthDataset { data, ctx, cfg })
    }

    #[getter]
    fn answers(&self) -> Vec<String> {
        self.data.answer_vocab.clone()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    #[getter]
    fn emb_dim(&self) -> usize {
        self.cfg.emb_dim
    }

    fn size(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    fn sample_ids(&self, split: &str) -> PyResult<Vec<String>> {
        Ok(self.split(split)?.iter().map(|s| s.id.clone()).collect())
    }

    fn question(&self, split: &str, id: &str) -> PyResult<Vec<String>> {
        let sample = find_sample(self.split(split)?, id)?;
        Ok(sample.question_tokens.clone())
    }

    fn __len__(&self) -> usize {
        self.data.train.len() + self.data.val.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "SynthDataset(objects={}, attrs={}, train={}, val={})",
            self.cfg.objects,
            self.cfg.attrs,
            self.data.train.len(),
            self.data.val.len()
        )
    }
}

fn find_sample<'a>(samples: &'a [SampleBundle], id: &str) -> PyResult<&'a SampleBundle> {
    samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| PyValueError::new_err(format!("unknown sample id '{id}'")))
}

/// The coarse-to-fine model: parameters plus the text context they
/// were trained with.
#[pyclass]
struct Model {
    params: CfrParams,
    config: CfrConfig,
    ctx: TextContext,
    answers: Vec<String>,
}

impl Model {
    fn answer_name(&self, idx: usize) -> String {
        self.answers.get(idx).cloned().unwrap_or_else(|| idx.to_string())
    }
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (dataset, dim = 32, seed = 0))]
    fn new(dataset: &SynthDataset, dim: usize, seed: u64) -> PyResult<Self> {
        let mut config = CfrConfig::desk(
            dataset.cfg.emb_dim,
            dataset.cfg.feature_dim(),
            dataset.data.answer_vocab.len(),
        )
        .with_joint_dim(dim);
        config.seed = seed;
        config.validate().map_err(err)?;
        let params = init_params(&config, seed);
        Ok(Model {
            params,
            config,
            ctx: dataset.ctx.clone(),
            answers: dataset.data.answer_vocab.clone(),
        })
    }

    /// Train on the dataset's train split, validating each epoch on the
    /// val split; keeps the best-validation parameters. Returns the
    /// per-epoch history as a list of dicts.
    #[pyo3(signature = (dataset, epochs = 30, batch = 32, lr = 1e-3, mode = "full", seed = 0))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &SynthDataset,
        epochs: usize,
        batch: usize,
        lr: f64,
        mode: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyList>> {
        let tcfg = TrainConfig {
            batch_size: batch,
            learning_rate: lr,
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let (params, history) = train_loop(
            &dataset.data.train,
            &dataset.data.val,
            &self.ctx,
            &self.config,
            &tcfg,
            parse_mode(mode)?,
        )
        .map_err(err)?;
        self.params = params;
        let out = PyList::empty(py);
        for stats in &history {
            let d = PyDict::new(py);
            d.set_item("epoch", stats.epoch)?;
            d.set_item("loss", stats.loss)?;
            d.set_item("val_acc", stats.val_acc)?;
            out.append(d)?;
        }
        Ok(out)
    }

    #[pyo3(signature = (dataset, split = "val", mode = "full"))]
    fn evaluate(&self, dataset: &SynthDataset, split: &str, mode: &str) -> PyResult<f64> {
        evaluate(dataset.split(split)?, &self.params, &self.ctx, &self.config, parse_mode(mode)?)
            .map_err(err)
    }

    /// Top-1 answer and its confidence for one sample.
    #[pyo3(signature = (dataset, id, split = "val", mode = "full"))]
    fn predict(
        &self,
        dataset: &SynthDataset,
        id: &str,
        split: &str,
        mode: &str,
    ) -> PyResult<(String, f64)> {
        let sample = find_sample(dataset.split(split)?, id)?;
        let (rho, _) =
            forward(sample, &self.params, &self.ctx, &self.config, parse_mode(mode)?)
                .map_err(err)?;
        let top = predict(&rho).map_err(err)?;
        Ok((self.answer_name(top), rho[top]))
    }

    /// Full explanation for one sample as a JSON string: top answers,
    /// filter scores for both modalities, both attention maps, and the
    /// per-answer adaptive weights.
    #[pyo3(signature = (dataset, id, split = "val"))]
    fn explain(&self, dataset: &SynthDataset, id: &str, split: &str) -> PyResult<String> {
        let sample = find_sample(dataset.split(split)?, id)?;
        let (_, expl) =
            forward(sample, &self.params, &self.ctx, &self.config, AblationMode::Full)
                .map_err(err)?;
        let adaptive: serde_json::Map<String, serde_json::Value> = expl
            .adaptive
            .iter()
            .map(|s| {
                (
                    self.answer_name(s.answer),
                    serde_json::json!({ "w_cg": s.w_cg, "w_fg": s.w_fg }),
                )
            })
            .collect();
        let report = serde_json::json!({
            "id": sample.id,
            "top_k": expl.top_k.iter().map(|t| serde_json::json!({
                "answer": self.answer_name(t.answer),
                "answer_index": t.answer,
                "confidence": t.confidence,
            })).collect::<Vec<_>>(),
            "psi_hat_image": expl.psi_hat_image,
            "psi_hat_question": expl.psi_hat_question,
            "A_cg": expl.a_cg,
            "A_fg": expl.a_fg,
            "adaptive": adaptive,
        });
        Ok(report.to_string())
    }

    /// Parameter tensor names and shapes as (name, rows, cols) tuples.
    fn parameters(&self) -> Vec<(String, usize, usize)> {
        self.params
            .named_tensors()
            .into_iter()
            .map(|(name, m)| (name, m.rows(), m.cols()))
            .collect()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.params, &self.config, &path).map_err(err)
    }

    /// Load a checkpoint; the dataset supplies the vocabulary and
    /// answer names it was trained against.
    #[staticmethod]
    fn load(path: PathBuf, dataset: &SynthDataset) -> PyResult<Self> {
        let (params, config) = load_checkpoint(&path).map_err(err)?;
        Ok(Model {
            params,
            config,
            ctx: dataset.ctx.clone(),
            answers: dataset.data.answer_vocab.clone(),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(d_emb={}, d_i={}, joint={}, answers={})",
            self.config.d_emb,
            self.config.d_i,
            self.config.d_cg,
            self.config.n_answers
        )
    }
}

/// Check every analytic gradient against central finite differences on
/// a tiny dataset. Returns {tensor name: worst relative error}; raises
/// if any tensor exceeds `tol`.
#[pyfunction]
#[pyo3(signature = (samples = 3, eps = 1e-5, tol = 1e-4, seed = 0))]
fn gradcheck<'py>(
    py: Python<'py>,
    samples: usize,
    eps: f64,
    tol: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let scfg = SynthConfig {
        objects: 5,
        attrs: 3,
        emb_dim: 5,
        scene_min: 2,
        scene_max: 3,
        noise: 0.2,
        dropout: 0.0,
        ghost_rate: 0.5,
        train_n: samples.max(1),
        val_n: 0,
        seed,
    };
    let synth = gen_synthetic(&scfg).map_err(err)?;
    let mut config =
        CfrConfig::desk(scfg.emb_dim, scfg.feature_dim(), scfg.attrs).with_joint_dim(4);
    config.seed = seed;
    let ctx = TextContext {
        question_filter: build_filter(&synth.stop_words, &synth.vocab, 0),
        vocab: synth.vocab,
        table: synth.table,
    };
    let params = init_params(&config, seed.wrapping_add(17));
    let (_, analytic) =
        batch_loss_and_grads(&synth.train, &params, &ctx, &config, AblationMode::Full)
            .map_err(err)?;
    let report = grad_check(
        |p| {
            batch_loss_and_grads(&synth.train, p, &ctx, &config, AblationMode::Full)
                .map(|(loss, _)| loss)
        },
        &params,
        &analytic,
        eps,
        tol,
    )
    .map_err(err)?;
    if !report.pass {
        let worst = report
            .per_param
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("non-empty report");
        return Err(PyValueError::new_err(format!(
            "gradient check failed: {} rel_err {:.3e} > tol {tol:.1e}",
            worst.name, worst.max_rel_error
        )));
    }
    let out = PyDict::new(py);
    for check in &report.per_param {
        out.set_item(&check.name, check.max_rel_error)?;
    }
    Ok(out)
}

/// Numerically stable softmax of a vector.
#[pyfunction]
fn softmax(x: Vec<f64>) -> PyResult<Vec<f64>> {
    softmax_vec(&x).map_err(err)
}

/// Plain matrix product of two row-major nested lists.
#[pyfunction]
fn matmul(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let a = Matrix::from_rows(&a).map_err(err)?;
    let b = Matrix::from_rows(&b).map_err(err)?;
    let c = matmul_rs(&a, &b).map_err(err)?;
    Ok((0..c.rows()).map(|r| c.row(r).to_vec()).collect())
}

#[pymodule]
fn cfr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<SynthDataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    Ok(())
}
