//! Blocking client for the wire protocol.

use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use super::protocol::{read_frame, FrameError, MessageError, WireMessage, MAX_FRAME};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error("connection closed by server")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub struct Client {
    sender: ClientSender,
    receiver: ClientReceiver,
}

/// Write half of a connection.
pub struct ClientSender {
    stream: TcpStream,
}

/// Read half of a connection.
pub struct ClientReceiver {
    reader: BufReader<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self {
            sender: ClientSender { stream },
            receiver: ClientReceiver { reader },
        })
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> Result<(), ClientError> {
        self.receiver.reader.get_ref().set_read_timeout(timeout)?;
        Ok(())
    }

    pub fn send(&mut self, msg: &WireMessage) -> Result<(), ClientError> {
        self.sender.send(msg)
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        self.sender.send_raw(bytes)
    }

    pub fn recv(&mut self) -> Result<WireMessage, ClientError> {
        self.receiver.recv()
    }

    /// Send one request and wait for the next message.
    pub fn call(&mut self, msg: &WireMessage) -> Result<WireMessage, ClientError> {
        self.send(msg)?;
        self.recv()
    }

    /// Another handle to the underlying socket, e.g. to shut it down from
    /// another thread.
    pub fn stream_clone(&self) -> Result<TcpStream, ClientError> {
        Ok(self.sender.stream.try_clone()?)
    }

    pub fn split(self) -> (ClientSender, ClientReceiver) {
        (self.sender, self.receiver)
    }
}

impl ClientSender {
    pub fn send(&mut self, msg: &WireMessage) -> Result<(), ClientError> {
        self.send_raw(&msg.to_frame())
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        self.stream.write_all(bytes)?;
        Ok(())
    }

    /// Close both directions; a blocked reader on the other half returns.
    pub fn close(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }

    /// Signal end of requests; responses can still be read.
    pub fn finish(&self) -> Result<(), ClientError> {
        self.stream.shutdown(Shutdown::Write)?;
        Ok(())
    }
}

impl ClientReceiver {
    pub fn recv(&mut self) -> Result<WireMessage, ClientError> {
        match read_frame(&mut self.reader, MAX_FRAME)? {
            Some(body) => Ok(WireMessage::from_json(&body)?),
            None => Err(ClientError::Closed),
        }
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> Result<(), ClientError> {
        self.reader.get_ref().set_read_timeout(timeout)?;
        Ok(())
    }
}
