//! Runs a [`LinkDriver`] over a byte stream (normally TCP).

use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::{TcpListener, TcpStream};

use crate::harness::link::LinkDriver;
use crate::harness::{Engine, HarnessError};
use crate::sync::transport::FramedConn;
use crate::time::Clock;

/// Drives one peer connection until either side closes it.
///
/// Sync-level errors end the link; engine errors caused by a single message
/// are logged and the link keeps going.
pub async fn run_link<S>(engine: Arc<Mutex<Engine>>, clock: Arc<dyn Clock>, stream: S, mut driver: LinkDriver) -> Result<(), HarnessError>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    let lock = || engine.lock().unwrap_or_else(|p| p.into_inner());
    let mut conn = FramedConn::new(stream);
    let mut rx = lock().subscribe();
    for env in driver.connect(clock.now()) {
        conn.send(&env).await?;
    }
    let mut tick = tokio::time::interval(Duration::from_secs(1));
    loop {
        let out = tokio::select! {
            msg = conn.recv() => match msg? {
                Some(env) => {
                    let result = driver.on_remote(&mut lock(), env, clock.now());
                    match result {
                        Ok(out) => out,
                        Err(HarnessError::Sync(e)) => return Err(e.into()),
                        Err(e) => {
                            tracing::warn!(error = %e, "peer message rejected");
                            Vec::new()
                        }
                    }
                }
                None => break,
            },
            Some(ev) = rx.recv() => driver.on_local(&ev, clock.now()),
            _ = tick.tick() => driver.poll(clock.now()),
        };
        for env in out {
            conn.send(&env).await?;
        }
        if driver.peer().is_closed() {
            break;
        }
    }
    Ok(())
}

/// Accepts peers one after another; each gets a fresh driver.
pub async fn listen(
    listener: TcpListener,
    engine: Arc<Mutex<Engine>>,
    clock: Arc<dyn Clock>,
    make_driver: impl Fn() -> LinkDriver,
) -> Result<(), HarnessError> {
    loop {
        let (stream, addr) = listener.accept().await?;
        tracing::info!(%addr, "sync peer connected");
        if let Err(e) = run_link(engine.clone(), clock.clone(), stream, make_driver()).await {
            tracing::warn!(%addr, error = %e, "sync link ended");
        }
    }
}

/// Dials a peer, retrying every second until it answers.
pub async fn connect(
    addr: String,
    engine: Arc<Mutex<Engine>>,
    clock: Arc<dyn Clock>,
    driver: LinkDriver,
) -> Result<(), HarnessError> {
    let stream = loop {
        match TcpStream::connect(&addr).await {
            Ok(s) => break s,
            Err(e) => {
                tracing::debug!(%addr, error = %e, "peer not reachable yet");
                tokio::time::sleep(Duration::from_secs(1)).await;
            }
        }
    };
    run_link(engine, clock, stream, driver).await
}
