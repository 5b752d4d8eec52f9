use std::fmt;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InstanceState {
    Booting,
    Ready,
    Draining,
    Dead,
}

/// Utilization snapshot a queue proxy reports for its instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceMetrics {
    pub instance_id: InstanceId,
    pub queue_depth: u32,
    pub in_flight: u32,
    pub last_active: Instant,
}

impl InstanceMetrics {
    pub fn load(&self) -> u32 {
        self.queue_depth + self.in_flight
    }
}

/// Least-loaded candidate; ties go to the lowest instance id.
pub fn choose_least_loaded<I>(candidates: I) -> Option<InstanceId>
where
    I: IntoIterator<Item = (InstanceId, u32)>,
{
    candidates.into_iter().min_by_key(|&(id, load)| (load, id)).map(|(id, _)| id)
}

/// `clamp(ceil(outstanding / concurrency), min_scale, max_scale)`.
pub fn desired_instances(total_outstanding: u32, concurrency: u32, min_scale: u32, max_scale: u32) -> u32 {
    total_outstanding.div_ceil(concurrency.max(1)).clamp(min_scale, max_scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_loaded_wins() {
        assert_eq!(choose_least_loaded([(InstanceId(1), 3), (InstanceId(2), 1)]), Some(InstanceId(2)));
    }

    #[test]
    fn ties_go_to_lowest_id() {
        assert_eq!(choose_least_loaded([(InstanceId(9), 2), (InstanceId(7), 2)]), Some(InstanceId(7)));
        assert_eq!(choose_least_loaded(Vec::new()), None);
    }

    #[test]
    fn scale_formula() {
        assert_eq!(desired_instances(10, 1, 0, 32), 10);
        assert_eq!(desired_instances(0, 1, 1, 32), 1);
        assert_eq!(desired_instances(7, 2, 0, 32), 4);
        assert_eq!(desired_instances(100, 1, 0, 32), 32);
        for outstanding in 0..50 {
            assert_eq!(desired_instances(outstanding, 1, 4, 4), 4);
        }
    }
}
