use std::fs;
use std::path::{Path, PathBuf};

use crackgnn_core::eval::{
    constant_mean_nrmse, export_results, ANGULAR_DENOMINATOR, posterior_predict, prediction_nrmse, CaseResult, EvalSummary,
    PosteriorPrediction,
};
use crackgnn_core::graph::{prepare_experiment, GraphSeries};
use crackgnn_core::io::{
    load_basis, load_checkpoint, load_experiment, load_graph, read_json, save_basis, save_checkpoint,
    save_experiment, save_graph, write_json, write_train_log, DatasetEntry,
};
use crackgnn_core::pca::PcaBasis;
use crackgnn_core::rng::{stream, streams};
use crackgnn_core::sim::Simulator;
use crackgnn_core::training::train;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{RunConfig, Stage};
use crate::error::CliError;
use crate::manifest::{require_upstream, write_manifest};
use crate::report::Reporter;

pub struct Context {
    pub config: RunConfig,
    pub workers: usize,
    pub report: Reporter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub healthy: Vec<DatasetEntry>,
    pub experiments: Vec<DatasetEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub id: String,
    pub split: Split,
    pub prediction: PosteriorPrediction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Context {
    fn dir(&self, stage: Stage) -> PathBuf {
        self.config.workdir.join(stage.dir())
    }

    fn fresh_dir(&self, stage: Stage) -> Result<PathBuf, CliError> {
        let dir = self.dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(CliError::io(format!("clearing {}", dir.display())))?;
        }
        fs::create_dir_all(&dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
        Ok(dir)
    }

    fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| CliError::Config(format!("cannot start {} workers: {e}", self.workers)))
    }

    fn split(&self, index: usize) -> Split {
        if index < self.config.train.n_train {
            Split::Train
        } else {
            Split::Test
        }
    }

    pub fn run(&self, stage: Stage) -> Result<(), CliError> {
        self.report.info(stage.name(), "start");
        match stage {
            Stage::Simulate => self.simulate(),
            Stage::FitPca => self.fit_pca(),
            Stage::BuildGraphs => self.build_graphs(),
            Stage::Train => self.train(),
            Stage::Predict => self.predict(),
            Stage::Eval => self.eval(),
        }?;
        self.report.info(stage.name(), "done");
        Ok(())
    }

    pub fn simulate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let dir = self.fresh_dir(Stage::Simulate)?;
        let sim = Simulator::new(c.tube.clone())?;
        let pool = self.pool()?;

        let healthy = (0..c.pca.n_healthy)
            .map(|i| {
                let exp = sim.healthy(c.seed, i);
                let file = format!("healthy_{i:03}.bin");
                save_experiment(&dir.join(&file), &exp)?;
                Ok(DatasetEntry {
                    id: format!("healthy_{i:03}"),
                    file,
                    seed: exp.seed(),
                    crack: None,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;

        let experiments = pool.install(|| {
            (0..c.n_experiments())
                .into_par_iter()
                .map(|i| {
                    let exp = sim.experiment(c.seed, i)?;
                    let file = format!("exp_{i:04}.bin");
                    save_experiment(&dir.join(&file), &exp)?;
                    self.report.event("simulate", "experiment", json!({ "index": i }));
                    Ok(DatasetEntry {
                        id: format!("exp_{i:04}"),
                        file,
                        seed: exp.seed(),
                        crack: exp.crack(),
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()
        })?;

        let index = DatasetIndex { healthy, experiments };
        let index_path = dir.join("index.json");
        write_json(&index_path, &index)?;
        let mut outputs: Vec<PathBuf> = index
            .healthy
            .iter()
            .chain(&index.experiments)
            .map(|e| dir.join(&e.file))
            .collect();
        outputs.push(index_path);
        write_manifest(c, Stage::Simulate, &[], &outputs)?;
        Ok(())
    }

    fn dataset_index(&self) -> Result<DatasetIndex, CliError> {
        Ok(read_json(&self.dir(Stage::Simulate).join("index.json"))?)
    }

    pub fn fit_pca(&self) -> Result<(), CliError> {
        let c = &self.config;
        require_upstream(c, Stage::FitPca)?;
        let data = self.dir(Stage::Simulate);
        let index = self.dataset_index()?;
        let inputs: Vec<PathBuf> = index.healthy.iter().map(|e| data.join(&e.file)).collect();
        let healthy = inputs.iter().map(|p| load_experiment(p)).collect::<Result<Vec<_>, _>>()?;

        let basis = PcaBasis::fit_healthy(&healthy, &c.pca, &mut stream(c.seed, &[streams::PCA]))?;
        let dir = self.fresh_dir(Stage::FitPca)?;
        let out = dir.join("basis.bin");
        save_basis(&out, &basis)?;
        write_manifest(c, Stage::FitPca, &inputs, &[out])?;
        Ok(())
    }

    pub fn build_graphs(&self) -> Result<(), CliError> {
        let c = &self.config;
        require_upstream(c, Stage::BuildGraphs)?;
        let basis_path = self.dir(Stage::FitPca).join("basis.bin");
        let basis = load_basis(&basis_path)?;
        let data = self.dir(Stage::Simulate);
        let index = self.dataset_index()?;
        let dir = self.fresh_dir(Stage::BuildGraphs)?;
        let pool = self.pool()?;

        let outputs = pool.install(|| {
            index
                .experiments
                .par_iter()
                .enumerate()
                .map(|(i, entry)| {
                    let exp = load_experiment(&data.join(&entry.file))?;
                    let mut rng = stream(c.seed, &[streams::SENSORS, i as u64]);
                    let series = prepare_experiment(&exp, &basis, &c.graph, &mut rng)?;
                    let out = dir.join(format!("{}.bin", entry.id));
                    save_graph(&out, &series)?;
                    self.report.event("build-graphs", "graph", json!({ "index": i }));
                    Ok(out)
                })
                .collect::<Result<Vec<_>, CliError>>()
        })?;

        let mut inputs = vec![basis_path];
        inputs.extend(index.experiments.iter().map(|e| data.join(&e.file)));
        write_manifest(c, Stage::BuildGraphs, &inputs, &outputs)?;
        Ok(())
    }

    fn load_graphs(&self) -> Result<(Vec<String>, Vec<PathBuf>, Vec<GraphSeries>), CliError> {
        let index = self.dataset_index()?;
        let dir = self.dir(Stage::BuildGraphs);
        let ids: Vec<String> = index.experiments.iter().map(|e| e.id.clone()).collect();
        let paths: Vec<PathBuf> = ids.iter().map(|id| dir.join(format!("{id}.bin"))).collect();
        let graphs = paths.iter().map(|p| load_graph(p)).collect::<Result<Vec<_>, _>>()?;
        Ok((ids, paths, graphs))
    }

    pub fn train(&self) -> Result<(), CliError> {
        let c = &self.config;
        require_upstream(c, Stage::Train)?;
        let (_, inputs, graphs) = self.load_graphs()?;
        let (train_set, test_set) = graphs.split_at(c.train.n_train);
        let report = self.report;
        let outcome = train(train_set, test_set, c.tube.length, &c.model, &c.train, |e| {
            report.event(
                "train",
                "epoch",
                json!({
                    "epoch": e.epoch,
                    "train_elbo": e.train_elbo,
                    "test_loss": e.test_loss,
                    "rmse_phi": e.rmse_phi,
                    "rmse_l": e.rmse_l,
                    "rmse_psi": e.rmse_psi,
                }),
            )
        })?;

        let dir = self.fresh_dir(Stage::Train)?;
        save_checkpoint(&dir, &outcome.localizer, outcome.best_epoch, json!({ "train": c.train }))?;
        let log_path = dir.join("train_log.csv");
        write_train_log(&log_path, &outcome.log)?;
        report.event("train", "best checkpoint", json!({ "epoch": outcome.best_epoch }));
        let outputs = vec![dir.join("manifest.json"), dir.join("params.bin"), log_path];
        write_manifest(c, Stage::Train, &inputs, &outputs)?;
        Ok(())
    }

    pub fn predict(&self) -> Result<(), CliError> {
        let c = &self.config;
        require_upstream(c, Stage::Predict)?;
        let model_dir = self.dir(Stage::Train);
        let (localizer, _) = load_checkpoint(&model_dir)?;
        let (ids, graph_paths, graphs) = self.load_graphs()?;

        let mut cases = Vec::with_capacity(graphs.len());
        for (i, (id, series)) in ids.into_iter().zip(&graphs).enumerate() {
            // one stream per experiment, so a case does not depend on the others
            let mut rng = stream(c.seed, &[streams::PREDICT, i as u64]);
            let prediction = posterior_predict(&localizer, series, c.eval.n_samples, c.train.eval_window, &mut rng)?;
            if prediction.samples.iter().any(|s| s.prediction.iter().any(|v| !v.is_finite())) {
                return Err(CliError::Numerical(format!("non-finite prediction for {id}")));
            }
            cases.push(CasePrediction {
                id,
                split: self.split(i),
                prediction,
            });
        }

        let dir = self.fresh_dir(Stage::Predict)?;
        let out = dir.join("predictions.json");
        write_json(&out, &cases)?;
        let mut inputs = vec![model_dir.join("manifest.json"), model_dir.join("params.bin")];
        inputs.extend(graph_paths);
        write_manifest(c, Stage::Predict, &inputs, &[out])?;
        Ok(())
    }

    pub fn eval(&self) -> Result<(), CliError> {
        let c = &self.config;
        require_upstream(c, Stage::Eval)?;
        let input = self.dir(Stage::Predict).join("predictions.json");
        let cases: Vec<CasePrediction> = read_json(&input)?;
        let summary = summarize_cases(&cases, c.eval.n_samples, c.train.eval_window)?;
        let test_cases: Vec<CaseResult> = cases
            .into_iter()
            .filter(|p| p.split == Split::Test)
            .map(|p| CaseResult {
                id: p.id,
                prediction: p.prediction,
            })
            .collect();

        self.fresh_dir(Stage::Eval)?;
        let dir = self.dir(Stage::Eval).join(&c.run_id);
        export_results(&dir, &test_cases, &summary)?;
        self.report.event("eval", "summary", serde_json::to_value(&summary).expect("serializable"));
        let mut outputs: Vec<PathBuf> = test_cases.iter().map(|p| dir.join(format!("{}.csv", p.id))).collect();
        outputs.push(dir.join("summary.json"));
        write_manifest(c, Stage::Eval, &[input], &outputs)?;
        Ok(())
    }
}

pub fn summarize_cases(cases: &[CasePrediction], n_samples: usize, window: usize) -> Result<EvalSummary, CliError> {
    let pick = |split: Split| -> Vec<PosteriorPrediction> {
        cases
            .iter()
            .filter(|p| p.split == split)
            .map(|p| p.prediction.clone())
            .collect()
    };
    let (train, test) = (pick(Split::Train), pick(Split::Test));
    if test.is_empty() {
        return Err(CliError::Config("no test experiments to evaluate".into()));
    }
    let truths = |ps: &[PosteriorPrediction]| -> Result<Vec<[f64; 3]>, CliError> {
        ps.iter()
            .map(|p| p.truth.ok_or_else(|| CliError::Config("prediction without a crack label".into())))
            .collect()
    };
    let train_nrmse = if train.is_empty() { None } else { Some(prediction_nrmse(&train)?) };
    let baseline = if train.is_empty() {
        None
    } else {
        Some(constant_mean_nrmse(&truths(&train)?, &truths(&test)?)?)
    };
    Ok(EvalSummary {
        n_samples,
        window,
        train: train_nrmse,
        test: prediction_nrmse(&test)?,
        constant_mean_baseline: baseline,
        angular_denominator: ANGULAR_DENOMINATOR.into(),
    })
}

/// `summary.json` of the configured run.
pub fn summary_path(workdir: &Path, run_id: &str) -> PathBuf {
    workdir.join(Stage::Eval.dir()).join(run_id).join("summary.json")
}
