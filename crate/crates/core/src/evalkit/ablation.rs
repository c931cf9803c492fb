use serde::{Deserialize, Serialize};

use super::{evaluate, EvalError, MetricsReport, TextTable};
use crate::corpus::{Example, Task};
use crate::pipeline::{Engine, EngineOptions, Retrieval};
use crate::prompt::Template;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub knn: bool,
    /// The task-specific switch: logit bias for NER, calibration for RE.
    pub component: bool,
}

/// Best model, minus the task component, minus kNN, minus both.
pub fn ablation_arms(task: Task) -> Vec<AblationArm> {
    let component = match task {
        Task::Ner => "Logit Biases",
        Task::Re => "Calibration",
    };
    let arm = |name: String, knn, component| AblationArm {
        name,
        knn,
        component,
    };
    vec![
        arm("Best Model".into(), true, true),
        arm(format!("- {component}"), true, false),
        arm("- kNN Module".into(), false, true),
        arm("- Both".into(), false, false),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub task: Task,
    pub config_id: String,
    pub eval_size: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> TextTable {
        let mut t = TextTable::new(&["", "Precision", "F1", "Recall"]);
        for row in &self.rows {
            let mut cells = vec![row.arm.name.clone()];
            cells.extend(row.metrics.pfr_cells());
            t.push(cells);
        }
        t
    }
}

/// Runs every arm on the same evaluation set. `engine` supplies the kNN
/// retrieval of the best model; arms without kNN draw shots at random with
/// `random_seed`.
pub fn run_ablation(
    engine: &Engine,
    template: &Template,
    shot_source: &[Example],
    eval: &[Example],
    random_seed: u64,
) -> Result<AblationReport, EvalError> {
    if !matches!(engine.retrieval(), Retrieval::Knn(_)) {
        return Err(EvalError::Setup(
            "ablation needs a kNN engine for the best-model arm".into(),
        ));
    }
    let task = template.config.task;
    let mut rows = Vec::new();
    for arm in ablation_arms(task) {
        let options = EngineOptions {
            logit_bias: task == Task::Ner && arm.component,
            calibration: task == Task::Re && arm.component,
            ..engine.options().clone()
        };
        let mut arm_engine = engine.with_options(options);
        if !arm.knn {
            arm_engine = arm_engine.with_retrieval(Retrieval::Random { seed: random_seed });
        }
        let (_, metrics) = evaluate(&arm_engine, template, shot_source, eval)?;
        log::info!("ablation arm '{}': F1 {:.4}", arm.name, metrics.f1);
        rows.push(AblationRow { arm, metrics });
    }
    Ok(AblationReport {
        task,
        config_id: template.config.id.clone(),
        eval_size: eval.len(),
        rows,
    })
}
