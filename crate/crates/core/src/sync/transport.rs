//! Framed envelopes over any async byte stream (TCP in practice).

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use super::{encode_envelope, FrameDecoder, SyncEnvelope, SyncError};

pub struct FramedConn<S> {
    io: S,
    decoder: FrameDecoder,
    buf: Vec<u8>,
}

impl<S: AsyncRead + AsyncWrite + Unpin> FramedConn<S> {
    pub fn new(io: S) -> Self {
        FramedConn { io, decoder: FrameDecoder::new(), buf: vec![0; 8192] }
    }

    pub async fn send(&mut self, env: &SyncEnvelope) -> Result<(), SyncError> {
        self.io.write_all(&encode_envelope(env)).await?;
        self.io.flush().await?;
        Ok(())
    }

    /// Next envelope, or `None` on a clean end of stream.
    pub async fn recv(&mut self) -> Result<Option<SyncEnvelope>, SyncError> {
        loop {
            if let Some(r) = self.decoder.next_envelope() {
                return r.map(Some);
            }
            let n = self.io.read(&mut self.buf).await?;
            if n == 0 {
                return if self.decoder.buffered() == 0 {
                    Ok(None)
                } else {
                    Err(SyncError::MalformedFrame("stream ended mid-frame".into()))
                };
            }
            self.decoder.push(&self.buf[..n]);
        }
    }

    pub fn into_inner(self) -> S {
        self.io
    }
}
