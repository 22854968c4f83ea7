//! Dataflow task engine.
//!
//! Tasks are submitted as app invocations and return [`FutureHandle`]s.
//! Passing a future as an argument to another task creates a dependency;
//! the [`DataFlowKernel`] launches each task once its inputs are available
//! and routes it to an [`Executor`]:
//!
//! * [`executor::LocalExecutor`], a thread pool in the engine process;
//! * [`htex::HtexExecutor`], a pilot-job executor with an interchange
//!   process and per-node managers supplied by a [`provider`];
//! * [`llex::LlexExecutor`], a low-latency executor with a stateless relay.
//!
//! Blocks of resources are scaled by the [`elasticity`] strategy, results
//! can be memoized and checkpointed, remote inputs are staged by
//! [`data`] transfer tasks, and everything is observable through
//! [`monitor`].

pub mod agent;
pub mod app;
pub mod builtins;
pub mod checkpoint;
pub mod clock;
pub mod codec;
pub mod data;
pub mod dfk;
pub mod elasticity;
pub mod executor;
pub mod future;
pub mod htex;
pub mod llex;
pub mod memo;
pub mod monitor;
pub mod provider;
pub mod task;
pub mod value;
pub mod wire;

pub use app::{AppKind, AppSpec, Registry};
pub use dfk::{Call, DataFlowKernel, EngineConfig, EngineError, SubmitError, Summary};
pub use executor::Executor;
pub use future::{FutureHandle, Outcome};
pub use task::{TaskError, TaskState};
pub use value::{FileRef, Kwargs, TaskId, Value};
