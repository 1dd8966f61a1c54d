//! SM-aligned placement and quota bookkeeping on a [`ClusterState`].
//!
//! Pods sharing a partition all run with that partition's SM share. A new pod
//! joins an existing partition of the same SM share when one has enough quota
//! headroom; otherwise it opens a new partition out of the GPU's unallocated
//! SMs. Anything else is rejected.

use std::fmt;

use thiserror::Error;

use crate::model::{
    ClusterState, FunctionId, GpuId, PartitionId, PodId, PodInstance, PodState, ScalingAction, ScalingKind, SmPartition, FULL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    /// No partition has this SM share and the unallocated SMs are too few.
    Alignment { unallocated_sm: u32 },
    /// Partitions with this SM share exist but none has enough quota left,
    /// and there is no room for another one.
    QuotaHeadroom { best_headroom: u32, unallocated_sm: u32 },
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::Alignment { unallocated_sm } => {
                write!(f, "no partition with this sm and only {unallocated_sm}% sm unallocated")
            }
            Rejection::QuotaHeadroom { best_headroom, unallocated_sm } => write!(
                f,
                "aligned partitions have at most {best_headroom}% quota headroom and only {unallocated_sm}% sm unallocated"
            ),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("unknown pod {0}")]
    UnknownPod(PodId),
    #[error("unknown gpu {0}")]
    UnknownGpu(GpuId),
    #[error("{what} {value} must be in 1..=100")]
    InvalidShare { what: &'static str, value: u32 },
    #[error("placement of sm={sm} quota={quota} on {gpu} rejected: {reason}")]
    PlacementRejected { gpu: GpuId, sm: u32, quota: u32, reason: Rejection },
    #[error("quota {requested} for {pod} exceeds available {available}")]
    QuotaUnavailable { pod: PodId, requested: u32, available: u32 },
    #[error("{0} is not a valid target for this action")]
    InvalidAction(PodId),
}

/// Where a pod lands on a GPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub gpu_id: GpuId,
    pub partition: PartitionId,
    /// `false` when a new partition has to be opened.
    pub joins_existing: bool,
}

/// Configuration of a pod about to be placed.
#[derive(Debug, Clone, PartialEq)]
pub struct NewPod {
    pub function_id: FunctionId,
    pub batch: u32,
    pub sm: u32,
    pub quota: u32,
    pub state: PodState,
    pub capability_rps: f64,
}

fn check_share(what: &'static str, value: u32) -> Result<(), AllocError> {
    if value == 0 || value > FULL {
        Err(AllocError::InvalidShare { what, value })
    } else {
        Ok(())
    }
}

impl ClusterState {
    fn pod(&self, pod_id: PodId) -> Result<&PodInstance, AllocError> {
        self.pods.get(&pod_id).ok_or(AllocError::UnknownPod(pod_id))
    }

    fn partition_of(&self, pod: &PodInstance) -> &SmPartition {
        self.gpus[&pod.gpu_id]
            .partition(pod.partition)
            .expect("pod references a missing partition")
    }

    /// Largest quota `pod_id` could hold on its current partition.
    pub fn max_avail_quota_for_pod(&self, pod_id: PodId) -> Result<u32, AllocError> {
        let pod = self.pod(pod_id)?;
        Ok(pod.quota + self.partition_of(pod).quota_headroom())
    }

    /// Best `(sm, quota)` a new pod could get on `gpu_id`: either join a
    /// partition (its sm, its quota headroom) or open a new one with all the
    /// unallocated SMs at full quota. Ranked by `sm * quota`, ties to the
    /// larger sm. `(0, 0)` when the GPU is full.
    pub fn max_avail_quota_and_sm(&self, gpu_id: GpuId) -> Result<(u32, u32), AllocError> {
        let gpu = self.gpus.get(&gpu_id).ok_or(AllocError::UnknownGpu(gpu_id))?;
        let joins = gpu
            .partitions
            .iter()
            .filter(|p| p.quota_headroom() > 0)
            .map(|p| (p.sm, p.quota_headroom()));
        let fresh = Some(gpu.sm_unallocated()).filter(|&sm| sm > 0).map(|sm| (sm, FULL));
        Ok(joins
            .chain(fresh)
            .max_by_key(|&(sm, quota)| (sm * quota, sm))
            .unwrap_or((0, 0)))
    }

    /// Decide where a pod with `(sm, quota)` would go, without mutating.
    pub fn check_placement(&self, gpu_id: GpuId, sm: u32, quota: u32) -> Result<Placement, AllocError> {
        check_share("sm", sm)?;
        check_share("quota", quota)?;
        let gpu = self.gpus.get(&gpu_id).ok_or(AllocError::UnknownGpu(gpu_id))?;
        let aligned = gpu.partitions.iter().filter(|p| p.sm == sm);
        // Best fit among aligned partitions: least headroom that still fits.
        let join = aligned
            .clone()
            .filter(|p| p.quota_headroom() >= quota)
            .min_by_key(|p| (p.quota_headroom(), p.id));
        if let Some(p) = join {
            return Ok(Placement { gpu_id, partition: p.id, joins_existing: true });
        }
        let unallocated_sm = gpu.sm_unallocated();
        if sm <= unallocated_sm {
            return Ok(Placement { gpu_id, partition: PartitionId(gpu.next_partition), joins_existing: false });
        }
        let reason = match aligned.map(|p| p.quota_headroom()).max() {
            Some(best_headroom) => Rejection::QuotaHeadroom { best_headroom, unallocated_sm },
            None => Rejection::Alignment { unallocated_sm },
        };
        Err(AllocError::PlacementRejected { gpu: gpu_id, sm, quota, reason })
    }

    /// Place a new pod on `gpu_id`, creating its partition if needed.
    pub fn place_pod(&mut self, gpu_id: GpuId, new: NewPod) -> Result<(PodId, Placement), AllocError> {
        let placement = self.check_placement(gpu_id, new.sm, new.quota)?;
        let id = PodId(self.next_pod);
        self.next_pod += 1;
        let gpu = self.gpus.get_mut(&gpu_id).expect("checked above");
        if !placement.joins_existing {
            gpu.partitions.push(SmPartition {
                id: placement.partition,
                sm: new.sm,
                resident_pods: Vec::new(),
                quota_allocated: 0,
            });
            gpu.next_partition += 1;
        }
        let partition = gpu.partition_mut(placement.partition).expect("partition exists");
        partition.resident_pods.push(id);
        partition.quota_allocated += new.quota;
        self.pods.insert(
            id,
            PodInstance {
                id,
                function_id: new.function_id,
                batch: new.batch,
                sm: new.sm,
                quota: new.quota,
                gpu_id,
                partition: placement.partition,
                state: new.state,
                capability_rps: new.capability_rps,
            },
        );
        Ok((id, placement))
    }

    /// Change a pod's quota in place; SM share and partition are fixed.
    pub fn set_quota(&mut self, pod_id: PodId, quota: u32) -> Result<(), AllocError> {
        check_share("quota", quota)?;
        let available = self.max_avail_quota_for_pod(pod_id)?;
        if quota > available {
            return Err(AllocError::QuotaUnavailable { pod: pod_id, requested: quota, available });
        }
        let pod = self.pods.get_mut(&pod_id).expect("checked above");
        let old = pod.quota;
        pod.quota = quota;
        let (gpu_id, part) = (pod.gpu_id, pod.partition);
        let partition = self.gpus.get_mut(&gpu_id).and_then(|g| g.partition_mut(part)).expect("partition exists");
        partition.quota_allocated = partition.quota_allocated - old + quota;
        Ok(())
    }

    pub fn set_pod_state(&mut self, pod_id: PodId, state: PodState) -> Result<(), AllocError> {
        self.pods.get_mut(&pod_id).ok_or(AllocError::UnknownPod(pod_id))?.state = state;
        Ok(())
    }

    pub fn set_capability(&mut self, pod_id: PodId, capability_rps: f64) -> Result<(), AllocError> {
        self.pods.get_mut(&pod_id).ok_or(AllocError::UnknownPod(pod_id))?.capability_rps = capability_rps;
        Ok(())
    }

    /// Remove a pod, returning its quota. Empty partitions are dropped, and a
    /// GPU without partitions is idle again.
    pub fn release_pod(&mut self, pod_id: PodId) -> Result<PodInstance, AllocError> {
        let pod = self.pods.remove(&pod_id).ok_or(AllocError::UnknownPod(pod_id))?;
        let gpu = self.gpus.get_mut(&pod.gpu_id).expect("pod on known gpu");
        let partition = gpu.partition_mut(pod.partition).expect("partition exists");
        partition.resident_pods.retain(|&p| p != pod_id);
        partition.quota_allocated -= pod.quota;
        if partition.resident_pods.is_empty() {
            gpu.partitions.retain(|p| p.id != pod.partition);
        }
        if gpu.partitions.is_empty() {
            gpu.next_partition = 0;
        }
        Ok(pod)
    }

    /// Apply one autoscaler action. Returns the affected pod id (the new id for
    /// `HorizontalUp`). `HorizontalDown` marks the pod Draining; the caller
    /// releases it once its in-flight work is done.
    pub fn apply_action(&mut self, action: &ScalingAction) -> Result<PodId, AllocError> {
        let target = &action.target;
        match action.kind {
            ScalingKind::VerticalUp | ScalingKind::VerticalDown => {
                let current = self.pod(target.id)?;
                if current.function_id != action.function_id || current.sm != target.sm {
                    return Err(AllocError::InvalidAction(target.id));
                }
                self.set_quota(target.id, target.quota)?;
                self.set_capability(target.id, target.capability_rps)?;
                Ok(target.id)
            }
            ScalingKind::HorizontalUp => {
                let (id, _) = self.place_pod(
                    target.gpu_id,
                    NewPod {
                        function_id: action.function_id.clone(),
                        batch: target.batch,
                        sm: target.sm,
                        quota: target.quota,
                        state: target.state,
                        capability_rps: target.capability_rps,
                    },
                )?;
                Ok(id)
            }
            ScalingKind::HorizontalDown => {
                self.pod(target.id)?;
                self.set_pod_state(target.id, PodState::Draining)?;
                Ok(target.id)
            }
        }
    }

    /// Verify the bookkeeping invariants: quota and SM capacity, alignment and
    /// pod/partition cross references.
    pub fn check_invariants(&self) -> Result<(), String> {
        for gpu in self.gpus.values() {
            if gpu.sm_allocated() > FULL {
                return Err(format!("{} has {}% sm allocated", gpu.id, gpu.sm_allocated()));
            }
            for part in &gpu.partitions {
                if part.resident_pods.is_empty() {
                    return Err(format!("{} partition {:?} is empty", gpu.id, part.id));
                }
                let mut sum = 0;
                for pid in &part.resident_pods {
                    let pod = self.pods.get(pid).ok_or_else(|| format!("{} lists missing {pid}", gpu.id))?;
                    if pod.gpu_id != gpu.id || pod.partition != part.id {
                        return Err(format!("{pid} does not point back to {} {:?}", gpu.id, part.id));
                    }
                    if pod.sm != part.sm {
                        return Err(format!("{pid} sm {} differs from partition sm {}", pod.sm, part.sm));
                    }
                    sum += pod.quota;
                }
                if sum != part.quota_allocated {
                    return Err(format!("{} {:?} records {} but pods hold {}", gpu.id, part.id, part.quota_allocated, sum));
                }
                if sum > FULL {
                    return Err(format!("{} {:?} quota oversubscribed: {}", gpu.id, part.id, sum));
                }
            }
        }
        for pod in self.pods.values() {
            if pod.quota == 0 || pod.quota > FULL {
                return Err(format!("{} has quota {}", pod.id, pod.quota));
            }
            let part = self
                .gpus
                .get(&pod.gpu_id)
                .and_then(|g| g.partition(pod.partition))
                .ok_or_else(|| format!("{} references missing partition", pod.id))?;
            if !part.resident_pods.contains(&pod.id) {
                return Err(format!("{} missing from its partition", pod.id));
            }
        }
        Ok(())
    }
}
