//! Function server: the SDK side of an instance that runs the user handler.

use std::panic::AssertUnwindSafe;
use std::sync::Arc;
use std::time::Instant;

use bytes::Bytes;
use futures::FutureExt;
use tokio::io::BufReader;
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinSet;

use super::{FunctionHandler, InvocationScope, Sdk, SdkContext, SdkError, Transport};
use crate::controlplane::envelope::{
    read_envelope, write_envelope, InvocationEnvelope, HEADER_SLACK, INBOUND_HEADER, STORE_REF_HEADER, TRANSPORT_HEADER,
};
use crate::costmodel::ExecutionLog;
use crate::dataplane::frame::{read_frame, Frame};
use crate::error::{ErrorCode, WireError};
use crate::refcrypto::{XdtReference, REF_HEADER};
use crate::sdk::ExecutionLedger;

pub const INBOUND_STREAM: &str = "stream";

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub function_url: String,
    pub ledger: ExecutionLedger,
}

/// Accepts requests from the local queue proxy until the task is dropped.
pub async fn serve(ctx: Arc<SdkContext>, listener: TcpListener, handler: Arc<dyn FunctionHandler>, opts: ServeOptions) {
    let mut conns = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let Ok((stream, _)) = accepted else { continue };
                let (ctx, handler, opts) = (ctx.clone(), handler.clone(), opts.clone());
                conns.spawn(async move {
                    let _ = serve_conn(stream, ctx, handler, opts).await;
                });
            }
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
}

async fn serve_conn(stream: TcpStream, ctx: Arc<SdkContext>, handler: Arc<dyn FunctionHandler>, opts: ServeOptions) -> Result<(), WireError> {
    stream.set_nodelay(true)?;
    let mut stream = BufReader::new(stream);
    let env = read_envelope(&mut stream, ctx.link().inline_limit + HEADER_SLACK).await?;
    let resp = match reconstruct(&mut stream, &ctx, &env).await {
        Ok(payload) => execute(&ctx, handler.as_ref(), &opts, &env, payload).await,
        Err(e) => env.fail(e.code(), e.to_string()),
    };
    write_envelope(stream.get_mut(), &resp).await
}

/// Rebuilds the original request body. Nothing here runs user code.
async fn reconstruct(stream: &mut BufReader<TcpStream>, ctx: &SdkContext, env: &InvocationEnvelope) -> Result<Bytes, SdkError> {
    if env.header(INBOUND_HEADER) == Some(INBOUND_STREAM) {
        let max = ctx.link().settings.get().chunk_size;
        let mut out = Vec::new();
        let mut seq = 0u32;
        loop {
            match read_frame(stream, max, seq).await {
                Ok(Frame::Chunk(c)) => {
                    out.extend_from_slice(&c.data);
                    if c.last {
                        return Ok(Bytes::from(out));
                    }
                    seq = seq.wrapping_add(1);
                }
                Ok(Frame::Abort) => return Err(SdkError::TransferFailed("queue proxy aborted the inbound stream".into())),
                Err(e) => return Err(SdkError::TransferFailed(e.to_string())),
            }
        }
    }
    if let Some(token) = env.header(STORE_REF_HEADER).or_else(|| env.header(REF_HEADER)) {
        return ctx.fetch(&XdtReference::from_token(token)).await;
    }
    Ok(env.inline_body.clone())
}

async fn execute(ctx: &Arc<SdkContext>, handler: &dyn FunctionHandler, opts: &ServeOptions, env: &InvocationEnvelope, payload: Bytes) -> InvocationEnvelope {
    let transport = env
        .header(TRANSPORT_HEADER)
        .and_then(|t| t.parse::<Transport>().ok())
        .unwrap_or(ctx.default_transport());
    let scope = Arc::new(InvocationScope::default());
    let sdk = Sdk::scoped(ctx.clone(), transport, scope.clone());

    let started = Instant::now();
    let result = AssertUnwindSafe(handler.call(payload, sdk.clone()))
        .catch_unwind()
        .await
        .unwrap_or_else(|_| Err(SdkError::function("handler panicked")));
    let duration_s = started.elapsed().as_secs_f64();

    let resp = match result {
        Ok(body) if body.len() > ctx.link().inline_limit => match sdk.put(body, 1).await {
            Ok(r) => {
                let header = if transport == Transport::Xdt { REF_HEADER } else { STORE_REF_HEADER };
                env.reply(Bytes::new()).with_header(header, r.into_string())
            }
            Err(e) => env.fail(ErrorCode::XdtTransferFailed, format!("buffering large response: {e}")),
        },
        Ok(body) => env.reply(body),
        Err(e) => env.fail(e.code(), e.to_string()),
    };

    let (stored_keys, bytes_put) = scope.take();
    opts.ledger.record(ExecutionLog {
        request_id: env.request_id.clone(),
        function_url: opts.function_url.clone(),
        duration_s,
        stored_keys,
        bytes_put,
    });
    resp
}
