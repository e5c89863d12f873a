use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::tensor::{Gradients, Real};

pub const TASK_MAIN: usize = 0;
pub const TASK_CLUSTER: usize = 1;
pub const TASK_DISTILL: usize = 2;
pub const TASK_ADVERSARIAL: usize = 3;

/// Wall-clock seconds spent on each training task, forward and backward.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskTimes {
    pub main: f64,
    pub cluster: f64,
    pub distill: f64,
    pub adversarial: f64,
    /// Measured around the whole step, independently of the buckets.
    pub step_total: f64,
}

impl TaskTimes {
    pub fn bucket_sum(&self) -> f64 {
        self.main + self.cluster + self.distill + self.adversarial
    }

    pub fn add_backward<T: Real>(&mut self, grads: &Gradients<T>) {
        self.main += grads.tag_time(TASK_MAIN).as_secs_f64();
        self.cluster += grads.tag_time(TASK_CLUSTER).as_secs_f64();
        self.distill += grads.tag_time(TASK_DISTILL).as_secs_f64();
        self.adversarial += grads.tag_time(TASK_ADVERSARIAL).as_secs_f64();
    }
}

impl AddAssign<&TaskTimes> for TaskTimes {
    fn add_assign(&mut self, o: &TaskTimes) {
        self.main += o.main;
        self.cluster += o.cluster;
        self.distill += o.distill;
        self.adversarial += o.adversarial;
        self.step_total += o.step_total;
    }
}
