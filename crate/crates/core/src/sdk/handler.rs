use std::collections::HashMap;
use std::future::Future;
use std::sync::Arc;

use bytes::Bytes;
use futures::future::BoxFuture;

use super::{Sdk, SdkError};

pub type HandlerFuture = BoxFuture<'static, Result<Bytes, SdkError>>;

/// User function logic. Each call receives the reconstructed request and a
/// fresh [`Sdk`] view; nothing carries over between invocations.
pub trait FunctionHandler: Send + Sync + 'static {
    fn call(&self, request: Bytes, sdk: Sdk) -> HandlerFuture;
}

impl<F, Fut> FunctionHandler for F
where
    F: Fn(Bytes, Sdk) -> Fut + Send + Sync + 'static,
    Fut: Future<Output = Result<Bytes, SdkError>> + Send + 'static,
{
    fn call(&self, request: Bytes, sdk: Sdk) -> HandlerFuture {
        Box::pin(self(request, sdk))
    }
}

/// Named handlers that cluster configs refer to.
#[derive(Clone, Default)]
pub struct HandlerRegistry {
    handlers: HashMap<String, Arc<dyn FunctionHandler>>,
}

impl HandlerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, handler: impl FunctionHandler) -> &mut Self {
        self.handlers.insert(name.into(), Arc::new(handler));
        self
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn FunctionHandler>> {
        self.handlers.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.handlers.keys().map(String::as_str)
    }
}

impl std::fmt::Debug for HandlerRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut names: Vec<_> = self.names().collect();
        names.sort_unstable();
        f.debug_struct("HandlerRegistry").field("handlers", &names).finish()
    }
}
