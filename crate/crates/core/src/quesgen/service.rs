//! Client for an external program-generation service.
//!
//! Wire protocol: one JSON object per line over TCP. The client sends a
//! [`ServiceRequest`] line and reads one [`ServiceResponse`] line back.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptProfile {
    /// Exemplars whose sub-questions name the object they ask about.
    Pointer,
    Plain,
}

impl std::str::FromStr for PromptProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pointer" => Ok(Self::Pointer),
            "plain" => Ok(Self::Plain),
            other => Err(format!("unknown prompt profile `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub question: String,
    pub prompt_profile: PromptProfile,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceResponse {
    #[serde(default)]
    pub program_text: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// `host:port`
    pub endpoint: String,
    pub timeout_ms: u64,
}

impl ServiceConfig {
    pub const ENDPOINT_ENV: &'static str = "VPD_PROGRAM_SERVICE";

    pub fn from_env(timeout_ms: u64) -> Option<Self> {
        std::env::var(Self::ENDPOINT_ENV)
            .ok()
            .map(|endpoint| Self { endpoint, timeout_ms })
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("program service at {endpoint} is unreachable: {reason}")]
    Unreachable { endpoint: String, reason: String },
    #[error("program service timed out after {0} ms")]
    Timeout(u64),
    #[error("program service protocol error: {0}")]
    Protocol(String),
    #[error("program service reported: {0}")]
    Remote(String),
}

/// In-context exemplars for the requested profile.
pub fn prompt_for(profile: PromptProfile) -> String {
    let sub = match profile {
        PromptProfile::Pointer => "What color is this flower?",
        PromptProfile::Plain => "What color is this?",
    };
    format!(
        "# Q: What color is the flower?\nobjs = image.find(\"flower\")\nreturn objs[0].simple_query(\"{sub}\")\n\
         # Q: Is the car red?\nobjs = image.find(\"car\")\nreturn objs[0].verify_property(\"car\", \"red\")\n"
    )
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

/// Asks the service for a program; the text comes back verbatim.
pub fn llm_generate(question: &str, profile: PromptProfile, config: &ServiceConfig) -> Result<String, ServiceError> {
    let timeout = Duration::from_millis(config.timeout_ms.max(1));
    let unreachable = |reason: String| ServiceError::Unreachable {
        endpoint: config.endpoint.clone(),
        reason,
    };
    let addrs: Vec<SocketAddr> = config
        .endpoint
        .to_socket_addrs()
        .map_err(|e| unreachable(e.to_string()))?
        .collect();
    let mut last = String::from("no addresses");
    let mut stream = None;
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) if is_timeout(&e) => return Err(ServiceError::Timeout(config.timeout_ms)),
            Err(e) => last = e.to_string(),
        }
    }
    let mut stream = stream.ok_or_else(|| unreachable(last))?;
    let io_err = |e: io::Error| {
        if is_timeout(&e) {
            ServiceError::Timeout(config.timeout_ms)
        } else {
            ServiceError::Protocol(e.to_string())
        }
    };
    stream.set_read_timeout(Some(timeout)).map_err(io_err)?;
    stream.set_write_timeout(Some(timeout)).map_err(io_err)?;

    let request = ServiceRequest {
        question: question.to_string(),
        prompt_profile: profile,
        prompt: prompt_for(profile),
    };
    let mut line = serde_json::to_string(&request).map_err(|e| ServiceError::Protocol(e.to_string()))?;
    line.push('\n');
    stream.write_all(line.as_bytes()).map_err(io_err)?;
    stream.flush().map_err(io_err)?;

    let mut reply = String::new();
    BufReader::new(&stream).read_line(&mut reply).map_err(io_err)?;
    if reply.trim().is_empty() {
        return Err(ServiceError::Protocol("empty response".into()));
    }
    let response: ServiceResponse =
        serde_json::from_str(reply.trim_end()).map_err(|e| ServiceError::Protocol(e.to_string()))?;
    match (response.program_text, response.error) {
        (_, Some(e)) => Err(ServiceError::Remote(e)),
        (Some(p), None) => Ok(p),
        (None, None) => Err(ServiceError::Protocol(
            "response has neither program_text nor error".into(),
        )),
    }
}

type Handler = dyn Fn(&ServiceRequest) -> ServiceResponse + Send + Sync;

/// A local stand-in for the service, answering each request with a handler.
/// Runs until the process exits.
pub struct StubService {
    addr: SocketAddr,
    _thread: JoinHandle<()>,
}

impl StubService {
    pub fn spawn(handler: impl Fn(&ServiceRequest) -> ServiceResponse + Send + Sync + 'static) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let handler: Arc<Handler> = Arc::new(handler);
        let thread = thread::spawn(move || {
            for conn in listener.incoming() {
                let Ok(conn) = conn else { continue };
                let handler = handler.clone();
                thread::spawn(move || {
                    let _ = serve_one(conn, handler.as_ref());
                });
            }
        });
        Ok(Self { addr, _thread: thread })
    }

    /// Always answers with the same program.
    pub fn canned(program: &str) -> io::Result<Self> {
        let program = program.to_string();
        Self::spawn(move |_| ServiceResponse {
            program_text: Some(program.clone()),
            error: None,
        })
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }
}

fn serve_one(conn: TcpStream, handler: &Handler) -> io::Result<()> {
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let response = match serde_json::from_str::<ServiceRequest>(line.trim_end()) {
        Ok(req) => handler(&req),
        Err(e) => ServiceResponse {
            program_text: None,
            error: Some(e.to_string()),
        },
    };
    let mut out = serde_json::to_string(&response).map_err(io::Error::other)?;
    out.push('\n');
    let mut conn = conn;
    conn.write_all(out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canned_round_trip() {
        let stub = StubService::canned("return \"yes\"").unwrap();
        let cfg = ServiceConfig {
            endpoint: stub.endpoint(),
            timeout_ms: 2000,
        };
        assert_eq!(
            llm_generate("Is it?", PromptProfile::Pointer, &cfg).unwrap(),
            "return \"yes\""
        );
    }

    #[test]
    fn profile_selects_exemplars() {
        let stub = StubService::spawn(|req| ServiceResponse {
            program_text: Some(format!(
                "{:?}|{}",
                req.prompt_profile,
                req.prompt.contains("this flower")
            )),
            error: None,
        })
        .unwrap();
        let cfg = ServiceConfig {
            endpoint: stub.endpoint(),
            timeout_ms: 2000,
        };
        assert_eq!(llm_generate("q", PromptProfile::Pointer, &cfg).unwrap(), "Pointer|true");
        assert_eq!(llm_generate("q", PromptProfile::Plain, &cfg).unwrap(), "Plain|false");
    }

    #[test]
    fn unreachable_endpoint() {
        // bind then drop to get a port nothing listens on
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let cfg = ServiceConfig {
            endpoint: format!("127.0.0.1:{port}"),
            timeout_ms: 500,
        };
        assert!(matches!(
            llm_generate("q", PromptProfile::Plain, &cfg),
            Err(ServiceError::Unreachable { .. })
        ));
    }

    #[test]
    fn silent_service_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let cfg = ServiceConfig {
            endpoint: listener.local_addr().unwrap().to_string(),
            timeout_ms: 200,
        };
        let err = llm_generate("q", PromptProfile::Plain, &cfg).unwrap_err();
        assert!(matches!(err, ServiceError::Timeout(200)), "{err}");
        drop(listener);
    }
}
