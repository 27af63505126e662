use super::{ExperimentConfig, Result};
use crate::seed::derive;
use crate::task::TaskKind;
use crate::taskbench::{
    gen_detection, gen_segmentation, partition_iid, partition_noniid, table1_spec,
    ClassificationTask, Sample,
};

/// Client shards plus held-out validation and test sets for one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: TaskKind,
    pub shards: Vec<Vec<Sample>>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskData {
    pub fn pooled(&self) -> Vec<Sample> {
        self.shards.iter().flatten().cloned().collect()
    }
}

fn balanced(n: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| n / classes + usize::from(c < n % classes))
        .collect()
}

/// Deterministic data for `task` under `seed`; identical across strategies.
pub fn build_task_data(cfg: &ExperimentConfig, task: TaskKind, seed: u64) -> Result<TaskData> {
    let clients = cfg.clients.of(task);
    let d = &cfg.data;
    let stream = |part: &str| derive(seed, &format!("data/{task}/{part}"));
    let (pool, val, test) = match task {
        TaskKind::Classification => {
            let gen = ClassificationTask::default();
            let pool = if d.uses_table1(clients) {
                let (_, totals) = table1_spec(d.classification_samples);
                gen.generate_with_counts(&totals, stream("train"))?
            } else {
                gen.generate(d.classification_samples, stream("train"))?
            };
            let val =
                gen.generate_with_counts(&balanced(d.val_samples, gen.classes), stream("val"))?;
            let test =
                gen.generate_with_counts(&balanced(d.test_samples, gen.classes), stream("test"))?;
            (pool, val, test)
        }
        TaskKind::Segmentation => (
            gen_segmentation(d.image_samples, stream("train")),
            gen_segmentation(d.val_samples, stream("val")),
            gen_segmentation(d.test_samples, stream("test")),
        ),
        TaskKind::Detection => (
            gen_detection(d.image_samples, stream("train")),
            gen_detection(d.val_samples, stream("val")),
            gen_detection(d.test_samples, stream("test")),
        ),
    };
    let plan = if task == TaskKind::Classification && d.uses_table1(clients) {
        partition_noniid(&pool, &table1_spec(d.classification_samples).0)?
    } else {
        partition_iid(&pool, clients, stream("partition"))?
    };
    let shards = plan
        .clients
        .iter()
        .map(|idx| idx.iter().map(|&i| pool[i].clone()).collect())
        .collect();
    Ok(TaskData {
        task,
        shards,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skewed_classification_shards_cover_the_pool() {
        let cfg = ExperimentConfig::default();
        let data = build_task_data(&cfg, TaskKind::Classification, 0).unwrap();
        assert_eq!(data.shards.len(), 6);
        assert_eq!(
            data.shards.iter().map(Vec::len).sum::<usize>(),
            cfg.data.classification_samples
        );
        assert!(data.shards[3].iter().all(|s| s.class() == Some(0)));
        assert!(data.shards[4].iter().all(|s| s.class() == Some(2)));
        let mut per_class = [0usize; 3];
        data.test
            .iter()
            .for_each(|s| per_class[s.class().unwrap()] += 1);
        assert_eq!(per_class, [200, 200, 200]);
    }

    #[test]
    fn data_depends_only_on_seed_and_task() {
        let cfg = ExperimentConfig::default();
        let mut other = cfg.clone();
        other.strategy = crate::experiment::StrategyChoice::Sl;
        let a = build_task_data(&cfg, TaskKind::Detection, 3).unwrap();
        let b = build_task_data(&other, TaskKind::Detection, 3).unwrap();
        assert_eq!(a.shards, b.shards);
        assert_eq!(a.test, b.test);
        let c = build_task_data(&cfg, TaskKind::Detection, 4).unwrap();
        assert_ne!(a.test, c.test);
    }
}
