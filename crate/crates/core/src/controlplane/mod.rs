//! Invocation path: activator, autoscaler, per-instance queue proxies.

mod activator;
mod autoscaler;
pub mod envelope;
mod instance;
mod metrics;
mod queue_proxy;

pub use activator::{Activator, RouteLoad};
pub(crate) use autoscaler::{spawn_autoscaler, Fleet};
pub use envelope::{read_envelope, write_envelope, InvocationEnvelope};
pub use instance::{FunctionSpec, Instance};
pub(crate) use instance::InstanceEnv;
pub use metrics::{choose_least_loaded, desired_instances, InstanceId, InstanceMetrics, InstanceState};
pub use queue_proxy::QueueProxy;
