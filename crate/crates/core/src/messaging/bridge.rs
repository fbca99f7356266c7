//! Mirrors broadcast traffic to an external MQTT broker (protocol 3.1.1,
//! QoS 0). Only the three packets a fire-and-forget publisher needs are
//! encoded here: CONNECT, PUBLISH and DISCONNECT.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Message;
use crate::engine::pool::{OutboundPool, PoolError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    /// `host:port` of the broker.
    pub broker: String,
    #[serde(default = "default_client_id")]
    pub client_id: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_client_id() -> String {
    "mmo-sim".to_string()
}

fn default_timeout_ms() -> u64 {
    1000
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("broker address {0:?} did not resolve")]
    Resolve(String),
    #[error("broker i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("broker refused connection (return code {0})")]
    Refused(u8),
    #[error("unexpected packet from broker: {0:#04x}")]
    Protocol(u8),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

pub struct MqttBridge {
    addr: SocketAddr,
    topic: String,
    config: BridgeConfig,
    pool: Arc<OutboundPool>,
    conn: Mutex<Option<TcpStream>>,
}

impl MqttBridge {
    pub fn new(config: BridgeConfig, run_id: &str, pool: Arc<OutboundPool>) -> Result<Self, BridgeError> {
        let addr = config
            .broker
            .to_socket_addrs()
            .map_err(|_| BridgeError::Resolve(config.broker.clone()))?
            .next()
            .ok_or_else(|| BridgeError::Resolve(config.broker.clone()))?;
        Ok(MqttBridge {
            addr,
            topic: format!("sim/{run_id}/broadcast"),
            config,
            pool,
            conn: Mutex::new(None),
        })
    }

    pub fn topic(&self) -> &str {
        &self.topic
    }

    /// Publishes one serialized message. A failed connection is dropped and
    /// re-established on the next call.
    pub fn publish(&self, msg: &Message) -> Result<(), BridgeError> {
        let _lease = self.pool.acquire()?;
        let payload = serde_json::to_vec(msg).expect("message serialization is infallible");
        let mut guard = self.conn.lock().expect("bridge lock");
        if guard.is_none() {
            *guard = Some(self.connect()?);
        }
        let stream = guard.as_mut().expect("connected above");
        let res = stream.write_all(&encode_publish(&self.topic, &payload));
        if res.is_err() {
            *guard = None;
        }
        Ok(res?)
    }

    pub fn disconnect(&self) {
        if let Some(mut s) = self.conn.lock().expect("bridge lock").take() {
            let _ = s.write_all(&[0xE0, 0x00]);
        }
    }

    fn connect(&self) -> Result<TcpStream, BridgeError> {
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let mut stream = TcpStream::connect_timeout(&self.addr, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        stream.write_all(&encode_connect(&self.config.client_id, 60))?;
        let mut ack = [0u8; 4];
        stream.read_exact(&mut ack)?;
        if ack[0] != 0x20 || ack[1] != 0x02 {
            return Err(BridgeError::Protocol(ack[0]));
        }
        if ack[3] != 0 {
            return Err(BridgeError::Refused(ack[3]));
        }
        Ok(stream)
    }
}

impl Drop for MqttBridge {
    fn drop(&mut self) {
        self.disconnect();
    }
}

fn push_remaining_length(buf: &mut Vec<u8>, mut len: usize) {
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        buf.push(byte);
        if len == 0 {
            break;
        }
    }
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_be_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub(crate) fn encode_connect(client_id: &str, keep_alive_secs: u16) -> Vec<u8> {
    let mut body = Vec::new();
    push_str(&mut body, "MQTT");
    body.push(4); // protocol level 3.1.1
    body.push(0x02); // clean session
    body.extend_from_slice(&keep_alive_secs.to_be_bytes());
    push_str(&mut body, client_id);
    let mut out = vec![0x10];
    push_remaining_length(&mut out, body.len());
    out.extend(body);
    out
}

pub(crate) fn encode_publish(topic: &str, payload: &[u8]) -> Vec<u8> {
    let mut body = Vec::new();
    push_str(&mut body, topic);
    body.extend_from_slice(payload);
    let mut out = vec![0x30];
    push_remaining_length(&mut out, body.len());
    out.extend(body);
    out
}
